// Independent reference implementations used as test oracles. These must not
// share code paths with the library kernels they check.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mapfusion/tensor.hpp"

namespace oracle {

// plain 6-loop cross-correlation, NCHW
template <typename T>
mf::TensorT<T> naive_conv2d(const mf::TensorT<T>& x, const mf::TensorT<T>& w, int stride,
                            int pad) {
    int n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
    int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (ww + 2 * pad - kw) / stride + 1;
    mf::TensorT<T> out(mf::Shape{n, co, ho, wo});
    for (int ni = 0; ni < n; ++ni)
        for (int c = 0; c < co; ++c)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    T acc = T(0);
                    for (int ic = 0; ic < ci; ++ic)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                int ih = oh * stride - pad + i;
                                int iw = ow * stride - pad + j;
                                if (ih < 0 || ih >= h || iw < 0 || iw >= ww) continue;
                                acc += x.at4(ni, ic, ih, iw) * w.at4(c, ic, i, j);
                            }
                    out.at4(ni, c, oh, ow) = acc;
                }
    return out;
}

// scalar Adam reference, one weight
struct ScalarAdam {
    double m = 0, v = 0;
    int64_t t = 0;
    double lr, b1, b2, eps;
    ScalarAdam(double lr_, double b1_ = 0.9, double b2_ = 0.999, double eps_ = 1e-8)
        : lr(lr_), b1(b1_), b2(b2_), eps(eps_) {}
    double update(double w, double g) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, t));
        double vhat = v / (1 - std::pow(b2, t));
        return w - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

// scalar DDPM chain: reverse diffusion on a single value given an epsilon
// predictor callback and a fixed noise stream
template <typename EpsFn>
double scalar_ddpm_chain(double x_T, const std::vector<double>& beta, EpsFn eps_fn,
                         const std::vector<double>& z_stream) {
    int T = static_cast<int>(beta.size());
    std::vector<double> alpha(T), abar(T);
    double run = 1.0;
    for (int i = 0; i < T; ++i) {
        alpha[i] = 1.0 - beta[i];
        run *= alpha[i];
        abar[i] = run;
    }
    double x = x_T;
    for (int t = T; t >= 1; --t) {
        double eps = eps_fn(x, t);
        double mu = (x - beta[t - 1] / std::sqrt(1.0 - abar[t - 1]) * eps) / std::sqrt(alpha[t - 1]);
        double sigma = (t > 1) ? std::sqrt(beta[t - 1]) : 0.0;
        x = mu + sigma * z_stream[static_cast<size_t>(T - t)];
    }
    return x;
}

// 8-connected flood count via union-find (library uses BFS labeling)
inline int unionfind_count(const std::vector<float>& img, int h, int w, float thr) {
    std::vector<int> parent(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<int>(i);
    std::function<int(int)> find = [&](int a) {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    };
    auto unite = [&](int a, int b) { parent[find(a)] = find(b); };
    auto on = [&](int r, int c) { return img[static_cast<size_t>(r) * w + c] > thr; };
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            if (!on(r, c)) continue;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    int rr = r + dr, cc = c + dc;
                    if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
                    if (on(rr, cc)) unite(r * w + c, rr * w + cc);
                }
        }
    int count = 0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (on(r, c) && find(r * w + c) == r * w + c) ++count;
    return count;
}

// convex polygon clip area: intersection area of two convex quads
// (Sutherland-Hodgman), used as the rectangle overlap oracle
using Poly = std::vector<std::pair<double, double>>;

inline Poly clip_poly(const Poly& subject, double ax, double ay, double bx, double by) {
    Poly out;
    auto side = [&](double px, double py) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    };
    size_t n = subject.size();
    for (size_t i = 0; i < n; ++i) {
        auto [cx, cy] = subject[i];
        auto [px, py] = subject[(i + n - 1) % n];
        double sc = side(cx, cy), sp = side(px, py);
        if (sc >= 0) {
            if (sp < 0) {
                double t = sp / (sp - sc);
                out.emplace_back(px + t * (cx - px), py + t * (cy - py));
            }
            out.emplace_back(cx, cy);
        } else if (sp >= 0) {
            double t = sp / (sp - sc);
            out.emplace_back(px + t * (cx - px), py + t * (cy - py));
        }
    }
    return out;
}

inline double poly_area(const Poly& p) {
    double a = 0;
    size_t n = p.size();
    for (size_t i = 0; i < n; ++i) {
        auto [x1, y1] = p[i];
        auto [x2, y2] = p[(i + 1) % n];
        a += x1 * y2 - x2 * y1;
    }
    return std::abs(a) / 2.0;
}

inline double convex_overlap_area(Poly a, const Poly& clip) {
    size_t n = clip.size();
    // clip must be counterclockwise
    Poly c = clip;
    double ar = 0;
    for (size_t i = 0; i < n; ++i) {
        auto [x1, y1] = c[i];
        auto [x2, y2] = c[(i + 1) % n];
        ar += x1 * y2 - x2 * y1;
    }
    if (ar < 0) std::reverse(c.begin(), c.end());
    Poly cur = std::move(a);
    for (size_t i = 0; i < n && !cur.empty(); ++i) {
        auto [x1, y1] = c[i];
        auto [x2, y2] = c[(i + 1) % n];
        cur = clip_poly(cur, x1, y1, x2, y2);
    }
    return cur.empty() ? 0.0 : poly_area(cur);
}

// empirical quantile by full sort + R-7 interpolation
inline double sorted_quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    if (q >= 1.0) return v.back();
    double h = q * (static_cast<double>(v.size()) - 1.0);
    size_t lo = static_cast<size_t>(h);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (h - lo) * (v[lo + 1] - v[lo]);
}

}  // namespace oracle
