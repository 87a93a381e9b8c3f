#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Value type is float for training and double for
// the finite-difference shadow mode.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(Shape s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(shape_numel(shape)), fill);
    }

    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
    static TensorT full(Shape s, T v) { return TensorT(std::move(s), v); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // NCHW accessor, used mostly by tests and the rasterizer glue.
    T& at4(int n, int c, int h, int w) {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at4(int n, int c, int h, int w) const {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    T& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    const T& at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;

template <typename T>
TensorT<T> reshaped(const TensorT<T>& t, Shape s) {
    if (shape_numel(s) != t.size())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(t.shape) +
                                    " -> " + shape_str(s));
    TensorT<T> out;
    out.shape = std::move(s);
    out.data = t.data;
    return out;
}

// splitmix64, used to derive independent substreams from one run seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Deterministic RNG. Normal variates use explicit Box-Muller so the byte
// stream does not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t n) {  // [0, n)
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(TensorT<T>& t) {
        for (auto& v : t.data) v = static_cast<T>(normal());
    }

    template <typename T>
    void fill_uniform(TensorT<T>& t, double lo, double hi) {
        for (auto& v : t.data) v = static_cast<T>(uniform(lo, hi));
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ---- raw kernels shared by forward ops and backward closures ----

// out[M,N] (+)= A[M,K] * B[K,N]; optional transposes refer to the logical view.
template <typename T>
void raw_matmul(const T* a, const T* b, T* out, int m, int k, int n, bool trans_a, bool trans_b,
                bool accumulate) {
    if (!accumulate)
        for (int64_t i = 0; i < static_cast<int64_t>(m) * n; ++i) out[i] = T(0);
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            T av = trans_a ? a[static_cast<int64_t>(p) * m + i] : a[static_cast<int64_t>(i) * k + p];
            if (av == T(0)) continue;
            const T* brow;
            if (!trans_b) {
                brow = b + static_cast<int64_t>(p) * n;
                T* orow = out + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            } else {
                T* orow = out + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) orow[j] += av * b[static_cast<int64_t>(j) * k + p];
            }
        }
    }
}

struct ConvDims {
    int n, ci, h, w, co, kh, kw, stride, pad, ho, wo;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad) {
    ConvDims d;
    d.n = x[0], d.ci = x[1], d.h = x[2], d.w = x[3];
    d.co = w[0], d.kh = w[2], d.kw = w[3];
    d.stride = stride, d.pad = pad;
    if (w[1] != d.ci)
        throw std::invalid_argument("conv2d: channel mismatch x=" + shape_str(x) +
                                    " w=" + shape_str(w));
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.ho <= 0 || d.wo <= 0) throw std::invalid_argument("conv2d: empty output");
    return d;
}

// Direct cross-correlation. Inner loop runs over contiguous output columns so
// the compiler can vectorize the fma.
template <typename T>
void conv2d_fwd(const T* x, const T* w, T* out, const ConvDims& d) {
    const int64_t xplane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.ho) * d.wo;
    for (int64_t i = 0; i < static_cast<int64_t>(d.n) * d.co * oplane; ++i) out[i] = T(0);
    for (int n = 0; n < d.n; ++n) {
        for (int co = 0; co < d.co; ++co) {
            T* oc = out + (static_cast<int64_t>(n) * d.co + co) * oplane;
            for (int ci = 0; ci < d.ci; ++ci) {
                const T* xc = x + (static_cast<int64_t>(n) * d.ci + ci) * xplane;
                const T* wc = w + (static_cast<int64_t>(co) * d.ci + ci) * d.kh * d.kw;
                for (int kh = 0; kh < d.kh; ++kh) {
                    for (int kw = 0; kw < d.kw; ++kw) {
                        T wv = wc[kh * d.kw + kw];
                        if (wv == T(0)) continue;
                        for (int oh = 0; oh < d.ho; ++oh) {
                            int ih = oh * d.stride - d.pad + kh;
                            if (ih < 0 || ih >= d.h) continue;
                            T* orow = oc + static_cast<int64_t>(oh) * d.wo;
                            const T* xrow = xc + static_cast<int64_t>(ih) * d.w;
                            if (d.stride == 1) {
                                int ow0 = std::max(0, d.pad - kw);
                                int ow1 = std::min(d.wo, d.w + d.pad - kw);
                                int base = -d.pad + kw;
                                for (int ow = ow0; ow < ow1; ++ow)
                                    orow[ow] += wv * xrow[ow + base];
                            } else {
                                for (int ow = 0; ow < d.wo; ++ow) {
                                    int iw = ow * d.stride - d.pad + kw;
                                    if (iw < 0 || iw >= d.w) continue;
                                    orow[ow] += wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_bwd_input(const T* g, const T* w, T* gx, const ConvDims& d) {
    const int64_t xplane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.ho) * d.wo;
    for (int n = 0; n < d.n; ++n) {
        for (int co = 0; co < d.co; ++co) {
            const T* gc = g + (static_cast<int64_t>(n) * d.co + co) * oplane;
            for (int ci = 0; ci < d.ci; ++ci) {
                T* gxc = gx + (static_cast<int64_t>(n) * d.ci + ci) * xplane;
                const T* wc = w + (static_cast<int64_t>(co) * d.ci + ci) * d.kh * d.kw;
                for (int kh = 0; kh < d.kh; ++kh) {
                    for (int kw = 0; kw < d.kw; ++kw) {
                        T wv = wc[kh * d.kw + kw];
                        if (wv == T(0)) continue;
                        for (int oh = 0; oh < d.ho; ++oh) {
                            int ih = oh * d.stride - d.pad + kh;
                            if (ih < 0 || ih >= d.h) continue;
                            const T* grow = gc + static_cast<int64_t>(oh) * d.wo;
                            T* gxrow = gxc + static_cast<int64_t>(ih) * d.w;
                            for (int ow = 0; ow < d.wo; ++ow) {
                                int iw = ow * d.stride - d.pad + kw;
                                if (iw < 0 || iw >= d.w) continue;
                                gxrow[iw] += wv * grow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_bwd_weight(const T* g, const T* x, T* gw, const ConvDims& d) {
    const int64_t xplane = static_cast<int64_t>(d.h) * d.w;
    const int64_t oplane = static_cast<int64_t>(d.ho) * d.wo;
    for (int n = 0; n < d.n; ++n) {
        for (int co = 0; co < d.co; ++co) {
            const T* gc = g + (static_cast<int64_t>(n) * d.co + co) * oplane;
            for (int ci = 0; ci < d.ci; ++ci) {
                const T* xc = x + (static_cast<int64_t>(n) * d.ci + ci) * xplane;
                T* gwc = gw + (static_cast<int64_t>(co) * d.ci + ci) * d.kh * d.kw;
                for (int kh = 0; kh < d.kh; ++kh) {
                    for (int kw = 0; kw < d.kw; ++kw) {
                        T acc = T(0);
                        for (int oh = 0; oh < d.ho; ++oh) {
                            int ih = oh * d.stride - d.pad + kh;
                            if (ih < 0 || ih >= d.h) continue;
                            const T* grow = gc + static_cast<int64_t>(oh) * d.wo;
                            const T* xrow = xc + static_cast<int64_t>(ih) * d.w;
                            for (int ow = 0; ow < d.wo; ++ow) {
                                int iw = ow * d.stride - d.pad + kw;
                                if (iw < 0 || iw >= d.w) continue;
                                acc += grow[ow] * xrow[iw];
                            }
                        }
                        gwc[kh * d.kw + kw] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace mf
