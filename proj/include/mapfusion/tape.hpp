#pragma once

#include <algorithm>
#include <functional>
#include <unordered_map>

#include "mapfusion/tensor.hpp"

namespace mf {

// A named model parameter. Gradients accumulate here across backward passes
// until zero_grads(); frozen parameters never receive gradients or updates.
template <typename T>
struct ParamT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;

    ParamT() = default;
    ParamT(std::string n, TensorT<T> v) : name(std::move(n)), value(std::move(v)) {
        grad = TensorT<T>::zeros(value.shape);
    }
};

using Param = ParamT<float>;

// Reverse-mode tape. Operations append nodes; backward() walks the tape in
// reverse creation order (which is a topological order by construction) and
// finally flushes leaf gradients into their bound parameters.
template <typename T>
class GraphT {
public:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        bool requires_grad = false;
        bool grad_ready = false;
        std::function<void(GraphT&, int)> backward;  // (graph, own id)
        ParamT<T>* bound = nullptr;
    };

    int value_node(TensorT<T> v) {
        Node n;
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int param(ParamT<T>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return it->second;
        Node n;
        n.value = p.value;
        n.requires_grad = p.trainable;
        n.bound = &p;
        nodes_.push_back(std::move(n));
        int id = static_cast<int>(nodes_.size()) - 1;
        param_nodes_[&p] = id;
        return id;
    }

    const TensorT<T>& val(int id) const { return nodes_[id].value; }
    const TensorT<T>& grad_of(int id) const { return nodes_[id].grad; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    size_t node_count() const { return nodes_.size(); }

    // ---- elementwise ----

    int add(int a, int b) {
        check_same(a, b, "add");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return unary_binary(std::move(out), a, b, [](GraphT& g, int id, int a2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i];
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int64_t i = 0; i < gb.size(); ++i) gb[i] += gr[i];
            });
        });
    }

    // a + r, but keeps a's bits where r is exactly zero. Used at control
    // branch injection points so a zero-initialized branch is a bit-exact
    // no-op even for signed zeros in the base activations.
    int add_skip_zero(int a, int b) {
        check_same(a, b, "add_skip_zero");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.size(); ++i)
            if (bv[i] != T(0)) out[i] += bv[i];
        return unary_binary(std::move(out), a, b, [](GraphT& g, int id, int a2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i];
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int64_t i = 0; i < gb.size(); ++i) gb[i] += gr[i];
            });
        });
    }

    int sub(int a, int b) {
        check_same(a, b, "sub");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return unary_binary(std::move(out), a, b, [](GraphT& g, int id, int a2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i];
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int64_t i = 0; i < gb.size(); ++i) gb[i] -= gr[i];
            });
        });
    }

    int mul(int a, int b) {
        check_same(a, b, "mul");
        TensorT<T> out = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return unary_binary(std::move(out), a, b, [](GraphT& g, int id, int a2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            const auto& av = g.nodes_[a2].value;
            const auto& bv2 = g.nodes_[b2].value;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i] * bv2[i];
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int64_t i = 0; i < gb.size(); ++i) gb[i] += gr[i] * av[i];
            });
        });
    }

    int scale(int a, double s) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = static_cast<T>(v * s);
        return unary(std::move(out), a, [s](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(gr[i] * s);
            });
        });
    }

    int silu(int a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) {
            T sg = T(1) / (T(1) + std::exp(-v));
            v = v * sg;
        }
        return unary(std::move(out), a, [](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            const auto& x = g.nodes_[a2].value;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) {
                    T sg = T(1) / (T(1) + std::exp(-x[i]));
                    ga[i] += gr[i] * sg * (T(1) + x[i] * (T(1) - sg));
                }
            });
        });
    }

    int sigmoid(int a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        int id = unary_placeholder(std::move(out), a);
        nodes_[id].backward = [a](GraphT& g, int id2) {
            const auto& gr = g.nodes_[id2].grad;
            const auto& y = g.nodes_[id2].value;
            g.accum(a, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i] * y[i] * (T(1) - y[i]);
            });
        };
        return id;
    }

    int tanh_op(int a) {
        TensorT<T> out = nodes_[a].value;
        for (auto& v : out.data) v = std::tanh(v);
        int id = unary_placeholder(std::move(out), a);
        nodes_[id].backward = [a](GraphT& g, int id2) {
            const auto& gr = g.nodes_[id2].grad;
            const auto& y = g.nodes_[id2].value;
            g.accum(a, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i] * (T(1) - y[i] * y[i]);
            });
        };
        return id;
    }

    // ---- linear algebra ----

    int matmul(int a, int b) {  // [M,K] x [K,N]
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
            throw std::invalid_argument("matmul: bad shapes " + shape_str(av.shape) + " x " +
                                        shape_str(bv.shape));
        int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        TensorT<T> out(Shape{m, n});
        raw_matmul(av.data.data(), bv.data.data(), out.data.data(), m, k, n, false, false, false);
        return unary_binary(std::move(out), a, b, [m, k, n](GraphT& g, int id, int a2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            const auto& av2 = g.nodes_[a2].value;
            const auto& bv2 = g.nodes_[b2].value;
            g.accum(a2, [&](TensorT<T>& ga) {  // gA += G * B^T
                raw_matmul(gr.data.data(), bv2.data.data(), ga.data.data(), m, n, k, false, true,
                           true);
            });
            g.accum(b2, [&](TensorT<T>& gb) {  // gB += A^T * G
                raw_matmul(av2.data.data(), gr.data.data(), gb.data.data(), k, m, n, true, false,
                           true);
            });
        });
    }

    int bmm(int a, int b, bool transpose_b = false) {  // [B,M,K] x [B,K,N] (or [B,N,K] if nt)
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
            throw std::invalid_argument("bmm: bad shapes");
        int bs = av.dim(0), m = av.dim(1), k = av.dim(2);
        int n = transpose_b ? bv.dim(1) : bv.dim(2);
        int bk = transpose_b ? bv.dim(2) : bv.dim(1);
        if (bk != k) throw std::invalid_argument("bmm: inner dim mismatch");
        TensorT<T> out(Shape{bs, m, n});
        for (int i = 0; i < bs; ++i)
            raw_matmul(av.data.data() + static_cast<int64_t>(i) * m * k,
                       bv.data.data() + static_cast<int64_t>(i) * k * n,
                       out.data.data() + static_cast<int64_t>(i) * m * n, m, k, n, false,
                       transpose_b, false);
        return unary_binary(
            std::move(out), a, b, [bs, m, k, n, transpose_b](GraphT& g, int id, int a2, int b2) {
                const auto& gr = g.nodes_[id].grad;
                const auto& av2 = g.nodes_[a2].value;
                const auto& bv2 = g.nodes_[b2].value;
                g.accum(a2, [&](TensorT<T>& ga) {
                    for (int i = 0; i < bs; ++i) {
                        const T* gp = gr.data.data() + static_cast<int64_t>(i) * m * n;
                        const T* bp = bv2.data.data() + static_cast<int64_t>(i) * k * n;
                        T* gap = ga.data.data() + static_cast<int64_t>(i) * m * k;
                        // G [M,N] x B^T -> with nt layout B is [N,K]: gA += G*B
                        raw_matmul(gp, bp, gap, m, n, k, false, !transpose_b, true);
                    }
                });
                g.accum(b2, [&](TensorT<T>& gb) {
                    for (int i = 0; i < bs; ++i) {
                        const T* gp = gr.data.data() + static_cast<int64_t>(i) * m * n;
                        const T* ap = av2.data.data() + static_cast<int64_t>(i) * m * k;
                        T* gbp = gb.data.data() + static_cast<int64_t>(i) * k * n;
                        if (!transpose_b)  // gB += A^T * G  [K,N]
                            raw_matmul(ap, gp, gbp, k, m, n, true, false, true);
                        else  // B stored [N,K]: gB += G^T * A
                            raw_matmul(gp, ap, gbp, n, m, k, true, false, true);
                    }
                });
            });
    }

    int conv2d(int x, int w, int stride, int pad) {
        const auto& xv = nodes_[x].value;
        const auto& wv = nodes_[w].value;
        ConvDims d = conv_dims(xv.shape, wv.shape, stride, pad);
        TensorT<T> out(Shape{d.n, d.co, d.ho, d.wo});
        conv2d_fwd(xv.data.data(), wv.data.data(), out.data.data(), d);
        return unary_binary(std::move(out), x, w, [d](GraphT& g, int id, int x2, int w2) {
            const auto& gr = g.nodes_[id].grad;
            const auto& xv2 = g.nodes_[x2].value;
            const auto& wv2 = g.nodes_[w2].value;
            g.accum(x2, [&](TensorT<T>& gx) {
                conv2d_bwd_input(gr.data.data(), wv2.data.data(), gx.data.data(), d);
            });
            g.accum(w2, [&](TensorT<T>& gw) {
                conv2d_bwd_weight(gr.data.data(), xv2.data.data(), gw.data.data(), d);
            });
        });
    }

    // ---- broadcast adds ----

    int bias_channel(int x, int b) {  // x[N,C,H,W] + b[C]
        const auto& xv = nodes_[x].value;
        const auto& bv = nodes_[b].value;
        if (xv.rank() != 4 || bv.size() != xv.dim(1))
            throw std::invalid_argument("bias_channel: bad shapes");
        TensorT<T> out = xv;
        int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
        for (int n = 0; n < xv.dim(0); ++n)
            for (int c = 0; c < xv.dim(1); ++c) {
                T* p = out.data.data() + (static_cast<int64_t>(n) * xv.dim(1) + c) * plane;
                T add = bv[c];
                for (int64_t i = 0; i < plane; ++i) p[i] += add;
            }
        return unary_binary(std::move(out), x, b, [plane](GraphT& g, int id, int x2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            const auto& sh = gr.shape;
            g.accum(x2, [&](TensorT<T>& gx) {
                for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gr[i];
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int n = 0; n < sh[0]; ++n)
                    for (int c = 0; c < sh[1]; ++c) {
                        const T* p = gr.data.data() + (static_cast<int64_t>(n) * sh[1] + c) * plane;
                        T acc = T(0);
                        for (int64_t i = 0; i < plane; ++i) acc += p[i];
                        gb[c] += acc;
                    }
            });
        });
    }

    int bias_rows(int x, int b) {  // x[R,E] + b[E]
        const auto& xv = nodes_[x].value;
        const auto& bv = nodes_[b].value;
        if (xv.rank() != 2 || bv.size() != xv.dim(1))
            throw std::invalid_argument("bias_rows: bad shapes");
        TensorT<T> out = xv;
        int r = xv.dim(0), e = xv.dim(1);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < e; ++j) out.at2(i, j) += bv[j];
        return unary_binary(std::move(out), x, b, [r, e](GraphT& g, int id, int x2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(x2, [&](TensorT<T>& gx) {
                for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gr[i];
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < e; ++j) gb[j] += gr.at2(i, j);
            });
        });
    }

    int bias_spatial(int x, int v) {  // x[N,C,H,W] + v[N,C] broadcast over H,W
        const auto& xv = nodes_[x].value;
        const auto& vv = nodes_[v].value;
        if (xv.rank() != 4 || vv.rank() != 2 || vv.dim(0) != xv.dim(0) || vv.dim(1) != xv.dim(1))
            throw std::invalid_argument("bias_spatial: bad shapes");
        TensorT<T> out = xv;
        int64_t plane = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
        for (int n = 0; n < xv.dim(0); ++n)
            for (int c = 0; c < xv.dim(1); ++c) {
                T* p = out.data.data() + (static_cast<int64_t>(n) * xv.dim(1) + c) * plane;
                T add = vv.at2(n, c);
                for (int64_t i = 0; i < plane; ++i) p[i] += add;
            }
        return unary_binary(std::move(out), x, v, [plane](GraphT& g, int id, int x2, int v2) {
            const auto& gr = g.nodes_[id].grad;
            const auto& sh = gr.shape;
            g.accum(x2, [&](TensorT<T>& gx) {
                for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gr[i];
            });
            g.accum(v2, [&](TensorT<T>& gv) {
                for (int n = 0; n < sh[0]; ++n)
                    for (int c = 0; c < sh[1]; ++c) {
                        const T* p = gr.data.data() + (static_cast<int64_t>(n) * sh[1] + c) * plane;
                        T acc = T(0);
                        for (int64_t i = 0; i < plane; ++i) acc += p[i];
                        gv.at2(n, c) += acc;
                    }
            });
        });
    }

    int add_bcast0(int x, int p) {  // x[B,M,D] + p[M,D] broadcast over dim 0
        const auto& xv = nodes_[x].value;
        const auto& pv = nodes_[p].value;
        if (xv.rank() != 3 || pv.rank() != 2 || pv.dim(0) != xv.dim(1) || pv.dim(1) != xv.dim(2))
            throw std::invalid_argument("add_bcast0: bad shapes");
        TensorT<T> out = xv;
        int64_t block = pv.size();
        for (int b = 0; b < xv.dim(0); ++b) {
            T* dst = out.data.data() + b * block;
            for (int64_t i = 0; i < block; ++i) dst[i] += pv[i];
        }
        return unary_binary(std::move(out), x, p, [block](GraphT& g, int id, int x2, int p2) {
            const auto& gr = g.nodes_[id].grad;
            int bs = gr.dim(0);
            g.accum(x2, [&](TensorT<T>& gx) {
                for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gr[i];
            });
            g.accum(p2, [&](TensorT<T>& gp) {
                for (int b = 0; b < bs; ++b) {
                    const T* src = gr.data.data() + b * block;
                    for (int64_t i = 0; i < block; ++i) gp[i] += src[i];
                }
            });
        });
    }

    // ---- normalization / softmax ----

    int softmax_rows(int a) {  // [R,L], softmax over L
        const auto& av = nodes_[a].value;
        if (av.rank() != 2) throw std::invalid_argument("softmax_rows: rank != 2");
        int r = av.dim(0), l = av.dim(1);
        TensorT<T> out(av.shape);
        for (int i = 0; i < r; ++i) {
            const T* src = av.data.data() + static_cast<int64_t>(i) * l;
            T* dst = out.data.data() + static_cast<int64_t>(i) * l;
            T mx = src[0];
            for (int j = 1; j < l; ++j) mx = std::max(mx, src[j]);
            T sum = T(0);
            for (int j = 0; j < l; ++j) {
                dst[j] = std::exp(src[j] - mx);
                sum += dst[j];
            }
            for (int j = 0; j < l; ++j) dst[j] /= sum;
        }
        int id = unary_placeholder(std::move(out), a);
        nodes_[id].backward = [a, r, l](GraphT& g, int id2) {
            const auto& gr = g.nodes_[id2].grad;
            const auto& y = g.nodes_[id2].value;
            g.accum(a, [&](TensorT<T>& ga) {
                for (int i = 0; i < r; ++i) {
                    const T* yp = y.data.data() + static_cast<int64_t>(i) * l;
                    const T* gp = gr.data.data() + static_cast<int64_t>(i) * l;
                    T dot = T(0);
                    for (int j = 0; j < l; ++j) dot += yp[j] * gp[j];
                    T* gap = ga.data.data() + static_cast<int64_t>(i) * l;
                    for (int j = 0; j < l; ++j) gap[j] += yp[j] * (gp[j] - dot);
                }
            });
        };
        return id;
    }

    int group_norm(int x, int gamma, int beta, int groups, double eps = 1e-5) {
        const auto& xv = nodes_[x].value;
        if (xv.rank() != 4) throw std::invalid_argument("group_norm: rank != 4");
        int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        if (c % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
        const auto& gv = nodes_[gamma].value;
        const auto& bv = nodes_[beta].value;
        if (gv.size() != c || bv.size() != c) throw std::invalid_argument("group_norm: affine dims");
        int cg = c / groups;
        int64_t gsz = static_cast<int64_t>(cg) * h * w;
        int64_t plane = static_cast<int64_t>(h) * w;

        TensorT<T> xhat(xv.shape);
        TensorT<T> inv_std(Shape{n, groups});
        TensorT<T> out(xv.shape);
        for (int ni = 0; ni < n; ++ni) {
            for (int g = 0; g < groups; ++g) {
                const T* src = xv.data.data() + (static_cast<int64_t>(ni) * c + g * cg) * plane;
                T mean = T(0);
                for (int64_t i = 0; i < gsz; ++i) mean += src[i];
                mean /= static_cast<T>(gsz);
                T var = T(0);
                for (int64_t i = 0; i < gsz; ++i) {
                    T dv = src[i] - mean;
                    var += dv * dv;
                }
                var /= static_cast<T>(gsz);
                T is = T(1) / std::sqrt(var + static_cast<T>(eps));
                inv_std.at2(ni, g) = is;
                T* xh = xhat.data.data() + (static_cast<int64_t>(ni) * c + g * cg) * plane;
                T* op = out.data.data() + (static_cast<int64_t>(ni) * c + g * cg) * plane;
                for (int cc = 0; cc < cg; ++cc) {
                    T ga = gv[g * cg + cc], be = bv[g * cg + cc];
                    for (int64_t i = 0; i < plane; ++i) {
                        T v = (src[cc * plane + i] - mean) * is;
                        xh[cc * plane + i] = v;
                        op[cc * plane + i] = ga * v + be;
                    }
                }
            }
        }
        Node node;
        node.value = std::move(out);
        node.requires_grad =
            nodes_[x].requires_grad || nodes_[gamma].requires_grad || nodes_[beta].requires_grad;
        nodes_.push_back(std::move(node));
        int id = static_cast<int>(nodes_.size()) - 1;
        auto xh_saved = std::make_shared<TensorT<T>>(std::move(xhat));
        auto is_saved = std::make_shared<TensorT<T>>(std::move(inv_std));
        nodes_[id].backward = [x, gamma, beta, groups, cg, plane, gsz, xh_saved,
                               is_saved](GraphT& g, int id2) {
            const auto& gr = g.nodes_[id2].grad;
            int n2 = gr.dim(0), c2 = gr.dim(1);
            const auto& gv2 = g.nodes_[gamma].value;
            const auto& xh = *xh_saved;
            const auto& istd = *is_saved;
            g.accum(gamma, [&](TensorT<T>& gg) {
                for (int ni = 0; ni < n2; ++ni)
                    for (int cc = 0; cc < c2; ++cc) {
                        const T* gp = gr.data.data() + (static_cast<int64_t>(ni) * c2 + cc) * plane;
                        const T* xp = xh.data.data() + (static_cast<int64_t>(ni) * c2 + cc) * plane;
                        T acc = T(0);
                        for (int64_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
                        gg[cc] += acc;
                    }
            });
            g.accum(beta, [&](TensorT<T>& gb) {
                for (int ni = 0; ni < n2; ++ni)
                    for (int cc = 0; cc < c2; ++cc) {
                        const T* gp = gr.data.data() + (static_cast<int64_t>(ni) * c2 + cc) * plane;
                        T acc = T(0);
                        for (int64_t i = 0; i < plane; ++i) acc += gp[i];
                        gb[cc] += acc;
                    }
            });
            g.accum(x, [&](TensorT<T>& gx) {
                for (int ni = 0; ni < n2; ++ni) {
                    for (int gi = 0; gi < groups; ++gi) {
                        int64_t base = (static_cast<int64_t>(ni) * c2 + gi * cg) * plane;
                        // p = dL/dxhat
                        T mean_p = T(0), mean_px = T(0);
                        for (int cc = 0; cc < cg; ++cc) {
                            T ga = gv2[gi * cg + cc];
                            const T* gp = gr.data.data() + base + cc * plane;
                            const T* xp = xh.data.data() + base + cc * plane;
                            for (int64_t i = 0; i < plane; ++i) {
                                T p = gp[i] * ga;
                                mean_p += p;
                                mean_px += p * xp[i];
                            }
                        }
                        mean_p /= static_cast<T>(gsz);
                        mean_px /= static_cast<T>(gsz);
                        T is = istd.at2(ni, gi);
                        for (int cc = 0; cc < cg; ++cc) {
                            T ga = gv2[gi * cg + cc];
                            const T* gp = gr.data.data() + base + cc * plane;
                            const T* xp = xh.data.data() + base + cc * plane;
                            T* gxp = gx.data.data() + base + cc * plane;
                            for (int64_t i = 0; i < plane; ++i)
                                gxp[i] += is * (gp[i] * ga - mean_p - xp[i] * mean_px);
                        }
                    }
                }
            });
        };
        return id;
    }

    // ---- data movement ----

    int reshape(int a, Shape s) {
        TensorT<T> out = reshaped(nodes_[a].value, std::move(s));
        Shape orig = nodes_[a].value.shape;
        return unary(std::move(out), a, [orig](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr[i];
            });
        });
    }

    int permute(int a, std::vector<int> perm) {
        const auto& av = nodes_[a].value;
        int r = av.rank();
        if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank");
        Shape oshape(r);
        for (int i = 0; i < r; ++i) oshape[i] = av.dim(perm[i]);
        TensorT<T> out(oshape);
        permute_copy(av, out, perm, false);
        return unary(std::move(out), a, [perm](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) { permute_copy(gr, ga, perm, true); });
        });
    }

    int concat_ch(int a, int b) {  // [N,Ca,H,W] + [N,Cb,H,W] -> [N,Ca+Cb,H,W]
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
            av.dim(3) != bv.dim(3))
            throw std::invalid_argument("concat_ch: bad shapes");
        int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
        int64_t plane = static_cast<int64_t>(av.dim(2)) * av.dim(3);
        TensorT<T> out(Shape{n, ca + cb, av.dim(2), av.dim(3)});
        for (int ni = 0; ni < n; ++ni) {
            std::copy_n(av.data.data() + ni * ca * plane, ca * plane,
                        out.data.data() + static_cast<int64_t>(ni) * (ca + cb) * plane);
            std::copy_n(bv.data.data() + ni * cb * plane, cb * plane,
                        out.data.data() + static_cast<int64_t>(ni) * (ca + cb) * plane + ca * plane);
        }
        return unary_binary(std::move(out), a, b, [n, ca, cb, plane](GraphT& g, int id, int a2, int b2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int ni = 0; ni < n; ++ni) {
                    const T* src = gr.data.data() + static_cast<int64_t>(ni) * (ca + cb) * plane;
                    T* dst = ga.data.data() + static_cast<int64_t>(ni) * ca * plane;
                    for (int64_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
                }
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int ni = 0; ni < n; ++ni) {
                    const T* src =
                        gr.data.data() + static_cast<int64_t>(ni) * (ca + cb) * plane + ca * plane;
                    T* dst = gb.data.data() + static_cast<int64_t>(ni) * cb * plane;
                    for (int64_t i = 0; i < cb * plane; ++i) dst[i] += src[i];
                }
            });
        });
    }

    int slice_ch(int a, int c0, int c1) {  // channels [c0, c1)
        const auto& av = nodes_[a].value;
        if (av.rank() != 4 || c0 < 0 || c1 > av.dim(1) || c0 >= c1)
            throw std::invalid_argument("slice_ch: bad range");
        int n = av.dim(0), c = av.dim(1);
        int64_t plane = static_cast<int64_t>(av.dim(2)) * av.dim(3);
        TensorT<T> out(Shape{n, c1 - c0, av.dim(2), av.dim(3)});
        for (int ni = 0; ni < n; ++ni)
            std::copy_n(av.data.data() + (static_cast<int64_t>(ni) * c + c0) * plane,
                        static_cast<int64_t>(c1 - c0) * plane,
                        out.data.data() + static_cast<int64_t>(ni) * (c1 - c0) * plane);
        return unary(std::move(out), a, [n, c, c0, c1, plane](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int ni = 0; ni < n; ++ni) {
                    const T* src = gr.data.data() + static_cast<int64_t>(ni) * (c1 - c0) * plane;
                    T* dst = ga.data.data() + (static_cast<int64_t>(ni) * c + c0) * plane;
                    for (int64_t i = 0; i < (c1 - c0) * plane; ++i) dst[i] += src[i];
                }
            });
        });
    }

    int upsample2x(int a) {  // nearest neighbor
        const auto& av = nodes_[a].value;
        if (av.rank() != 4) throw std::invalid_argument("upsample2x: rank != 4");
        int n = av.dim(0), c = av.dim(1), h = av.dim(2), w = av.dim(3);
        TensorT<T> out(Shape{n, c, 2 * h, 2 * w});
        for (int nc = 0; nc < n * c; ++nc) {
            const T* src = av.data.data() + static_cast<int64_t>(nc) * h * w;
            T* dst = out.data.data() + static_cast<int64_t>(nc) * 4 * h * w;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    T v = src[i * w + j];
                    dst[(2 * i) * 2 * w + 2 * j] = v;
                    dst[(2 * i) * 2 * w + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
                }
        }
        return unary(std::move(out), a, [n, c, h, w](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int nc = 0; nc < n * c; ++nc) {
                    const T* src = gr.data.data() + static_cast<int64_t>(nc) * 4 * h * w;
                    T* dst = ga.data.data() + static_cast<int64_t>(nc) * h * w;
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j)
                            dst[i * w + j] += src[(2 * i) * 2 * w + 2 * j] +
                                              src[(2 * i) * 2 * w + 2 * j + 1] +
                                              src[(2 * i + 1) * 2 * w + 2 * j] +
                                              src[(2 * i + 1) * 2 * w + 2 * j + 1];
                }
            });
        });
    }

    int avgpool2x(int a) {
        const auto& av = nodes_[a].value;
        if (av.rank() != 4 || av.dim(2) % 2 || av.dim(3) % 2)
            throw std::invalid_argument("avgpool2x: bad shape");
        int n = av.dim(0), c = av.dim(1), h = av.dim(2) / 2, w = av.dim(3) / 2;
        TensorT<T> out(Shape{n, c, h, w});
        for (int nc = 0; nc < n * c; ++nc) {
            const T* src = av.data.data() + static_cast<int64_t>(nc) * 4 * h * w;
            T* dst = out.data.data() + static_cast<int64_t>(nc) * h * w;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    dst[i * w + j] =
                        (src[(2 * i) * 2 * w + 2 * j] + src[(2 * i) * 2 * w + 2 * j + 1] +
                         src[(2 * i + 1) * 2 * w + 2 * j] + src[(2 * i + 1) * 2 * w + 2 * j + 1]) /
                        T(4);
        }
        return unary(std::move(out), a, [n, c, h, w](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int nc = 0; nc < n * c; ++nc) {
                    const T* src = gr.data.data() + static_cast<int64_t>(nc) * h * w;
                    T* dst = ga.data.data() + static_cast<int64_t>(nc) * 4 * h * w;
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j) {
                            T q = src[i * w + j] / T(4);
                            dst[(2 * i) * 2 * w + 2 * j] += q;
                            dst[(2 * i) * 2 * w + 2 * j + 1] += q;
                            dst[(2 * i + 1) * 2 * w + 2 * j] += q;
                            dst[(2 * i + 1) * 2 * w + 2 * j + 1] += q;
                        }
                }
            });
        });
    }

    // ---- reductions / losses ----

    int sum_all(int a) {
        const auto& av = nodes_[a].value;
        T acc = T(0);
        for (T v : av.data) acc += v;
        TensorT<T> out(Shape{1});
        out[0] = acc;
        return unary(std::move(out), a, [](GraphT& g, int id, int a2) {
            T gr = g.nodes_[id].grad[0];
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += gr;
            });
        });
    }

    int mean_all(int a) {
        int64_t n = nodes_[a].value.size();
        return scale(sum_all(a), 1.0 / static_cast<double>(n));
    }

    int mean_tokens(int a) {  // [B,M,D] -> [B,D]
        const auto& av = nodes_[a].value;
        if (av.rank() != 3) throw std::invalid_argument("mean_tokens: rank != 3");
        int b = av.dim(0), m = av.dim(1), dd = av.dim(2);
        TensorT<T> out(Shape{b, dd});
        for (int bi = 0; bi < b; ++bi)
            for (int mi = 0; mi < m; ++mi) {
                const T* src = av.data.data() + (static_cast<int64_t>(bi) * m + mi) * dd;
                T* dst = out.data.data() + static_cast<int64_t>(bi) * dd;
                for (int di = 0; di < dd; ++di) dst[di] += src[di];
            }
        for (auto& v : out.data) v /= static_cast<T>(m);
        return unary(std::move(out), a, [b, m, dd](GraphT& g, int id, int a2) {
            const auto& gr = g.nodes_[id].grad;
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int bi = 0; bi < b; ++bi)
                    for (int mi = 0; mi < m; ++mi) {
                        T* dst = ga.data.data() + (static_cast<int64_t>(bi) * m + mi) * dd;
                        const T* src = gr.data.data() + static_cast<int64_t>(bi) * dd;
                        for (int di = 0; di < dd; ++di) dst[di] += src[di] / static_cast<T>(m);
                    }
            });
        });
    }

    int mse(int a, int b) {
        check_same(a, b, "mse");
        const auto& av = nodes_[a].value;
        const auto& bv = nodes_[b].value;
        T acc = T(0);
        for (int64_t i = 0; i < av.size(); ++i) {
            T d = av[i] - bv[i];
            acc += d * d;
        }
        TensorT<T> out(Shape{1});
        int64_t n = av.size();
        out[0] = acc / static_cast<T>(n);
        return unary_binary(std::move(out), a, b, [n](GraphT& g, int id, int a2, int b2) {
            T gr = g.nodes_[id].grad[0];
            const auto& av2 = g.nodes_[a2].value;
            const auto& bv2 = g.nodes_[b2].value;
            T k = gr * T(2) / static_cast<T>(n);
            g.accum(a2, [&](TensorT<T>& ga) {
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += k * (av2[i] - bv2[i]);
            });
            g.accum(b2, [&](TensorT<T>& gb) {
                for (int64_t i = 0; i < gb.size(); ++i) gb[i] -= k * (av2[i] - bv2[i]);
            });
        });
    }

    // ---- backward driver ----

    void backward(int loss) {
        if (nodes_[loss].value.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(nodes_[loss].value.shape));
        ensure_grad(loss);
        nodes_[loss].grad[0] = T(1);
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || !n.grad_ready || !n.backward) continue;
            n.backward(*this, id);
        }
        for (auto& [p, id] : param_nodes_) {
            if (!p->trainable || !nodes_[id].grad_ready) continue;
            const auto& g = nodes_[id].grad;
            for (int64_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
        }
    }

private:
    std::vector<Node> nodes_;
    std::unordered_map<ParamT<T>*, int> param_nodes_;

    void check_same(int a, int b, const char* what) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                        shape_str(nodes_[a].value.shape) + " vs " +
                                        shape_str(nodes_[b].value.shape));
    }

    void ensure_grad(int id) {
        if (!nodes_[id].grad_ready) {
            nodes_[id].grad = TensorT<T>::zeros(nodes_[id].value.shape);
            nodes_[id].grad_ready = true;
        }
    }

    template <typename F>
    void accum(int id, F&& fill) {
        if (!nodes_[id].requires_grad) return;
        ensure_grad(id);
        fill(nodes_[id].grad);
    }

    int unary_placeholder(TensorT<T> value, int a) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = nodes_[a].requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    template <typename F>
    int unary(TensorT<T> value, int a, F&& bw) {
        int id = unary_placeholder(std::move(value), a);
        nodes_[id].backward = [a, bw](GraphT& g, int id2) { bw(g, id2, a); };
        return id;
    }

    template <typename F>
    int unary_binary(TensorT<T> value, int a, int b, F&& bw) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
        nodes_.push_back(std::move(n));
        int id = static_cast<int>(nodes_.size()) - 1;
        nodes_[id].backward = [a, b, bw](GraphT& g, int id2) { bw(g, id2, a, b); };
        return id;
    }

    static void permute_copy(const TensorT<T>& src, TensorT<T>& dst, const std::vector<int>& perm,
                             bool inverse_accumulate) {
        int r = src.rank();
        std::vector<int64_t> sstride(r, 1), dstride(r, 1);
        const Shape& ss = inverse_accumulate ? dst.shape : src.shape;
        // strides of the un-permuted tensor
        std::vector<int64_t> stride(r, 1);
        for (int i = r - 2; i >= 0; --i) stride[i] = stride[i + 1] * ss[i + 1];
        // iterate over the un-permuted index space
        std::vector<int> idx(r, 0);
        int64_t total = shape_numel(ss);
        // permuted strides: position j of output corresponds to dim perm[j] of input
        std::vector<int64_t> pstride(r, 1);
        {
            Shape pshape(r);
            for (int i = 0; i < r; ++i) pshape[i] = ss[perm[i]];
            std::vector<int64_t> ps(r, 1);
            for (int i = r - 2; i >= 0; --i) ps[i] = ps[i + 1] * pshape[i + 1];
            for (int i = 0; i < r; ++i) pstride[perm[i]] = ps[i];
        }
        for (int64_t lin = 0; lin < total; ++lin) {
            int64_t rem = lin, poff = 0;
            for (int i = 0; i < r; ++i) {
                int64_t q = rem / stride[i];
                rem -= q * stride[i];
                poff += q * pstride[i];
            }
            if (!inverse_accumulate)
                dst[poff] = src[lin];
            else
                dst[lin] += src[poff];
        }
    }
};

using Graph = GraphT<float>;

}  // namespace mf
