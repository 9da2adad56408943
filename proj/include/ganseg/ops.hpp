#pragma once

#include "ganseg/tape.hpp"
#include "ganseg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ganseg {

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

/// Resolves a tensor's node handle against the tape doing the recording;
/// handles issued by any other tape read as -1 (constant).
template <typename S>
inline int node_on(const Tensor<S>& t, const Tape<S>* tape) {
    return tape ? t.node_on(tape->id()) : -1;
}

inline bool any_recorded(std::initializer_list<int> input_nodes) {
    for (int n : input_nodes) {
        if (n >= 0) return true;
    }
    return false;
}

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* op) {
    if (!(a == b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " +
                                    b.str());
    }
}

/// Unpacks one image [C,H,W] into a row-major K x P patch matrix with
/// K = C*kh*kw and P = oh*ow. Out-of-bounds taps read as zero padding.
template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride, int pad, int oh, int ow,
            S* cols) {
    const std::int64_t P = static_cast<std::int64_t>(oh) * ow;
    for (int c = 0; c < C; ++c) {
        const S* plane = x + static_cast<std::int64_t>(c) * H * W;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                S* dst = cols + (static_cast<std::int64_t>(c) * kh * kw + u * kw + v) * P;
                for (int i = 0; i < oh; ++i) {
                    const int ih = i * stride + u - pad;
                    S* row = dst + static_cast<std::int64_t>(i) * ow;
                    if (ih < 0 || ih >= H) {
                        std::fill(row, row + ow, S(0));
                        continue;
                    }
                    const S* src = plane + static_cast<std::int64_t>(ih) * W;
                    for (int j = 0; j < ow; ++j) {
                        const int iw = j * stride + v - pad;
                        row[j] = (iw >= 0 && iw < W) ? src[iw] : S(0);
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-adds a K x P patch matrix back into [C,H,W].
template <typename S>
void col2im_add(const S* cols, int C, int H, int W, int kh, int kw, int stride, int pad, int oh,
                int ow, S* x) {
    const std::int64_t P = static_cast<std::int64_t>(oh) * ow;
    for (int c = 0; c < C; ++c) {
        S* plane = x + static_cast<std::int64_t>(c) * H * W;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                const S* src = cols + (static_cast<std::int64_t>(c) * kh * kw + u * kw + v) * P;
                for (int i = 0; i < oh; ++i) {
                    const int ih = i * stride + u - pad;
                    if (ih < 0 || ih >= H) continue;
                    S* row = plane + static_cast<std::int64_t>(ih) * W;
                    const S* srow = src + static_cast<std::int64_t>(i) * ow;
                    for (int j = 0; j < ow; ++j) {
                        const int iw = j * stride + v - pad;
                        if (iw >= 0 && iw < W) row[iw] += srow[j];
                    }
                }
            }
        }
    }
}

template <typename S>
void add_into(Tape<S>& tape, int node, const S* g, std::int64_t n) {
    S* acc = tape.grad_accum(node);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(acc, n) +=
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(g, n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    Tensor<S> out(a.shape());
    out.array() = a.array() + b.array();
    const int na = detail::node_on(a, tape), nb = detail::node_on(b, tape);
    if (detail::any_recorded({na, nb})) {
        const std::int64_t n = out.size();
        out.set_node(tape->record(n, {na, nb},
                                  [na, nb, n](const S* g, Tape<S>& t) {
                                      if (na >= 0) detail::add_into(t, na, g, n);
                                      if (nb >= 0) detail::add_into(t, nb, g, n);
                                  }),
                     tape->id());
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<S> out(a.shape());
    out.array() = a.array() - b.array();
    const int na = detail::node_on(a, tape), nb = detail::node_on(b, tape);
    if (detail::any_recorded({na, nb})) {
        const std::int64_t n = out.size();
        out.set_node(tape->record(n, {na, nb},
                                  [na, nb, n](const S* g, Tape<S>& t) {
                                      if (na >= 0) detail::add_into(t, na, g, n);
                                      if (nb >= 0) {
                                          S* acc = t.grad_accum(nb);
                                          for (std::int64_t i = 0; i < n; ++i) acc[i] -= g[i];
                                      }
                                  }),
                     tape->id());
    }
    return out;
}

/// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<S> out(a.shape());
    out.array() = a.array() * b.array();
    const int na = detail::node_on(a, tape), nb = detail::node_on(b, tape);
    if (detail::any_recorded({na, nb})) {
        const std::int64_t n = out.size();
        auto av = a.storage(), bv = b.storage();
        out.set_node(tape->record(n, {na, nb},
                                  [na, nb, n, av, bv](const S* g, Tape<S>& t) {
                                      if (na >= 0) {
                                          S* acc = t.grad_accum(na);
                                          for (std::int64_t i = 0; i < n; ++i)
                                              acc[i] += g[i] * (*bv)[i];
                                      }
                                      if (nb >= 0) {
                                          S* acc = t.grad_accum(nb);
                                          for (std::int64_t i = 0; i < n; ++i)
                                              acc[i] += g[i] * (*av)[i];
                                      }
                                  }),
                     tape->id());
    }
    return out;
}

/// y = k*x + c, elementwise.
template <typename S>
Tensor<S> affine(const Tensor<S>& x, S k, S c, Tape<S>* tape = nullptr) {
    Tensor<S> out(x.shape());
    out.array() = x.array() * k + c;
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = out.size();
        out.set_node(tape->record(n, {nx},
                                  [nx, n, k](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      for (std::int64_t i = 0; i < n; ++i) acc[i] += k * g[i];
                                  }),
                     tape->id());
    }
    return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    return affine(x, S(-1), S(0), tape);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S k, Tape<S>* tape = nullptr) {
    return affine(x, k, S(0), tape);
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    Tensor<S> out(x.shape());
    out.array() = x.array().abs();
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = out.size();
        auto xv = x.storage();
        out.set_node(tape->record(n, {nx},
                                  [nx, n, xv](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      // subgradient at 0 is 0
                                      for (std::int64_t i = 0; i < n; ++i) {
                                          const S x_i = (*xv)[i];
                                          acc[i] += g[i] * (x_i > S(0)   ? S(1)
                                                            : x_i < S(0) ? S(-1)
                                                                         : S(0));
                                      }
                                  }),
                     tape->id());
    }
    return out;
}

/// Natural logarithm; callers are responsible for keeping inputs positive
/// (losses clamp scores first).
template <typename S>
Tensor<S> log(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    Tensor<S> out(x.shape());
    out.array() = x.array().log();
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = out.size();
        auto xv = x.storage();
        out.set_node(tape->record(n, {nx},
                                  [nx, n, xv](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      for (std::int64_t i = 0; i < n; ++i)
                                          acc[i] += g[i] / (*xv)[i];
                                  }),
                     tape->id());
    }
    return out;
}

/// Clamps into [lo, hi]; gradient passes only through elements strictly inside.
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi, Tape<S>* tape = nullptr) {
    Tensor<S> out(x.shape());
    out.array() = x.array().max(lo).min(hi);
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = out.size();
        auto xv = x.storage();
        out.set_node(tape->record(n, {nx},
                                  [nx, n, xv, lo, hi](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      for (std::int64_t i = 0; i < n; ++i) {
                                          const S x_i = (*xv)[i];
                                          if (x_i > lo && x_i < hi) acc[i] += g[i];
                                      }
                                  }),
                     tape->id());
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    if (x.size() == 0) throw std::invalid_argument("sum of empty tensor");
    const double total = x.array().template cast<double>().sum();
    Tensor<S> out = Tensor<S>::scalar_tensor(static_cast<S>(total));
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = x.size();
        out.set_node(tape->record(1, {nx},
                                  [nx, n](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      for (std::int64_t i = 0; i < n; ++i) acc[i] += g[0];
                                  }),
                     tape->id());
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, Tape<S>* tape = nullptr) {
    if (x.size() == 0) throw std::invalid_argument("mean of empty tensor");
    const double total = x.array().template cast<double>().sum();
    Tensor<S> out = Tensor<S>::scalar_tensor(static_cast<S>(total / static_cast<double>(x.size())));
    const int nx = detail::node_on(x, tape);
    if (nx >= 0) {
        const std::int64_t n = x.size();
        out.set_node(tape->record(1, {nx},
                                  [nx, n](const S* g, Tape<S>& t) {
                                      S* acc = t.grad_accum(nx);
                                      const S gi = g[0] / static_cast<S>(n);
                                      for (std::int64_t i = 0; i < n; ++i) acc[i] += gi;
                                  }),
                     tape->id());
    }
    return out;
}

/// Concatenates along the channel axis; N, H, W must agree.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    const Shape4 sa = a.shape(), sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
        throw std::invalid_argument("concat_channels: incompatible shapes " + sa.str() + " vs " +
                                    sb.str());
    }
    Tensor<S> out({sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::int64_t plane = static_cast<std::int64_t>(sa.h) * sa.w;
    const std::int64_t block_a = sa.c * plane, block_b = sb.c * plane;
    for (int n = 0; n < sa.n; ++n) {
        std::memcpy(out.data() + n * (block_a + block_b), a.data() + n * block_a,
                    block_a * sizeof(S));
        std::memcpy(out.data() + n * (block_a + block_b) + block_a, b.data() + n * block_b,
                    block_b * sizeof(S));
    }
    const int na = detail::node_on(a, tape), nb = detail::node_on(b, tape);
    if (detail::any_recorded({na, nb})) {
        const int N = sa.n;
        out.set_node(
            tape->record(out.size(), {na, nb},
                         [na, nb, N, block_a, block_b](const S* g, Tape<S>& t) {
                             if (na >= 0) {
                                 S* acc = t.grad_accum(na);
                                 for (int n = 0; n < N; ++n) {
                                     const S* src = g + n * (block_a + block_b);
                                     S* dst = acc + n * block_a;
                                     for (std::int64_t i = 0; i < block_a; ++i) dst[i] += src[i];
                                 }
                             }
                             if (nb >= 0) {
                                 S* acc = t.grad_accum(nb);
                                 for (int n = 0; n < N; ++n) {
                                     const S* src = g + n * (block_a + block_b) + block_a;
                                     S* dst = acc + n * block_b;
                                     for (std::int64_t i = 0; i < block_b; ++i) dst[i] += src[i];
                                 }
                             }
                         }),
            tape->id());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

/// 2-D cross-correlation (no kernel flip). x: [N,Cin,H,W], weight:
/// [Cout,Cin,kH,kW], bias: [1,Cout,1,1]. Zero padding, single stride for both
/// spatial dims.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, int stride,
                 int pad, Tape<S>* tape = nullptr) {
    const Shape4 xs = x.shape(), ws = weight.shape();
    const int N = xs.n, Cin = xs.c, H = xs.h, W = xs.w;
    const int Cout = ws.n, kh = ws.h, kw = ws.w;
    if (ws.c != Cin) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(Cin) +
                                    " do not match weight " + ws.str());
    }
    if (bias.size() != Cout) {
        throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.size()) +
                                    " does not match Cout " + std::to_string(Cout));
    }
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    if (kh > H + 2 * pad || kw > W + 2 * pad) {
        throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" +
                                    std::to_string(kw) + " exceeds padded input " + xs.str());
    }
    const int oh = conv_out_dim(H, kh, stride, pad);
    const int ow = conv_out_dim(W, kw, stride, pad);
    if (oh < 1 || ow < 1) {
        throw std::invalid_argument("conv2d: zero-sized output for input " + xs.str());
    }

    const std::int64_t K = static_cast<std::int64_t>(Cin) * kh * kw;
    const std::int64_t P = static_cast<std::int64_t>(oh) * ow;
    Tensor<S> out({N, Cout, oh, ow});
    std::vector<S> cols(K * P);
    Eigen::Map<const MatrixRM<S>> wmat(weight.data(), Cout, K);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bvec(bias.data(), Cout);
    for (int n = 0; n < N; ++n) {
        detail::im2col(x.data() + x.index(n, 0, 0, 0), Cin, H, W, kh, kw, stride, pad, oh, ow,
                       cols.data());
        Eigen::Map<const MatrixRM<S>> colm(cols.data(), K, P);
        Eigen::Map<MatrixRM<S>> outm(out.data() + out.index(n, 0, 0, 0), Cout, P);
        outm.noalias() = wmat * colm;
        outm.colwise() += bvec;
    }

    const int nx = detail::node_on(x, tape);
    const int nw = detail::node_on(weight, tape);
    const int nb = detail::node_on(bias, tape);
    if (detail::any_recorded({nx, nw, nb})) {
        auto xv = x.storage();
        auto wv = weight.storage();
        out.set_node(
            tape->record(
                out.size(), {nx, nw, nb},
                [=](const S* g, Tape<S>& t) {
                    std::vector<S> cols2(K * P);
                    Eigen::Map<const MatrixRM<S>> wm(wv->data(), Cout, K);
                    for (int n = 0; n < N; ++n) {
                        Eigen::Map<const MatrixRM<S>> gm(
                            g + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
                        if (nw >= 0) {
                            detail::im2col(xv->data() + static_cast<std::int64_t>(n) * Cin * H * W,
                                           Cin, H, W, kh, kw, stride, pad, oh, ow, cols2.data());
                            Eigen::Map<const MatrixRM<S>> colm(cols2.data(), K, P);
                            Eigen::Map<MatrixRM<S>> gw(t.grad_accum(nw), Cout, K);
                            gw.noalias() += gm * colm.transpose();
                        }
                        if (nx >= 0) {
                            Eigen::Map<MatrixRM<S>> gcols(cols2.data(), K, P);
                            gcols.noalias() = wm.transpose() * gm;
                            detail::col2im_add(cols2.data(), Cin, H, W, kh, kw, stride, pad, oh,
                                               ow,
                                               t.grad_accum(nx) +
                                                   static_cast<std::int64_t>(n) * Cin * H * W);
                        }
                        if (nb >= 0) {
                            S* gb = t.grad_accum(nb);
                            for (int c = 0; c < Cout; ++c) gb[c] += gm.row(c).sum();
                        }
                    }
                }),
            tape->id());
    }
    return out;
}

/// Transposed convolution, the exact adjoint of conv2d under the same
/// (stride, padding) geometry. x: [N,Cin,H,W], weight: [Cin,Cout,kH,kW].
/// Output spatial size (H-1)*stride - 2*pad + kH + output_padding.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                           int stride, int pad, int output_padding = 0, Tape<S>* tape = nullptr) {
    const Shape4 xs = x.shape(), ws = weight.shape();
    const int N = xs.n, Cin = xs.c, H = xs.h, W = xs.w;
    const int Cout = ws.c, kh = ws.h, kw = ws.w;
    if (ws.n != Cin) {
        throw std::invalid_argument("conv_transpose2d: input channels " + std::to_string(Cin) +
                                    " do not match weight " + ws.str());
    }
    if (bias.size() != Cout) {
        throw std::invalid_argument("conv_transpose2d: bias size does not match Cout");
    }
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv_transpose2d: bad stride/padding");
    if (output_padding < 0 || output_padding >= stride) {
        throw std::invalid_argument("conv_transpose2d: output_padding must be in [0, stride)");
    }
    const int OH = (H - 1) * stride - 2 * pad + kh + output_padding;
    const int OW = (W - 1) * stride - 2 * pad + kw + output_padding;
    if (OH < 1 || OW < 1) {
        throw std::invalid_argument("conv_transpose2d: non-positive output size for input " +
                                    xs.str());
    }

    const std::int64_t K = static_cast<std::int64_t>(Cout) * kh * kw;
    const std::int64_t P = static_cast<std::int64_t>(H) * W;
    Tensor<S> out({N, Cout, OH, OW});
    std::vector<S> cols(K * P);
    Eigen::Map<const MatrixRM<S>> wmat(weight.data(), Cin, K);
    for (int n = 0; n < N; ++n) {
        Eigen::Map<const MatrixRM<S>> xm(x.data() + x.index(n, 0, 0, 0), Cin, P);
        Eigen::Map<MatrixRM<S>> colm(cols.data(), K, P);
        colm.noalias() = wmat.transpose() * xm;
        S* dst = out.data() + out.index(n, 0, 0, 0);
        detail::col2im_add(cols.data(), Cout, OH, OW, kh, kw, stride, pad, H, W, dst);
        for (int c = 0; c < Cout; ++c) {
            Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(
                dst + static_cast<std::int64_t>(c) * OH * OW,
                static_cast<std::int64_t>(OH) * OW) += bias.data()[c];
        }
    }

    const int nx = detail::node_on(x, tape);
    const int nw = detail::node_on(weight, tape);
    const int nb = detail::node_on(bias, tape);
    if (detail::any_recorded({nx, nw, nb})) {
        auto xv = x.storage();
        auto wv = weight.storage();
        out.set_node(tape->record(
            out.size(), {nx, nw, nb},
            [=](const S* g, Tape<S>& t) {
                std::vector<S> gcols(K * P);
                Eigen::Map<const MatrixRM<S>> wm(wv->data(), Cin, K);
                const std::int64_t out_block = static_cast<std::int64_t>(Cout) * OH * OW;
                for (int n = 0; n < N; ++n) {
                    const S* gn = g + n * out_block;
                    if (nx >= 0 || nw >= 0) {
                        detail::im2col(gn, Cout, OH, OW, kh, kw, stride, pad, H, W, gcols.data());
                    }
                    Eigen::Map<const MatrixRM<S>> gcolm(gcols.data(), K, P);
                    if (nx >= 0) {
                        Eigen::Map<MatrixRM<S>> gx(t.grad_accum(nx) +
                                                       static_cast<std::int64_t>(n) * Cin * P,
                                                   Cin, P);
                        gx.noalias() += wm * gcolm;
                    }
                    if (nw >= 0) {
                        Eigen::Map<const MatrixRM<S>> xm(
                            xv->data() + static_cast<std::int64_t>(n) * Cin * P, Cin, P);
                        Eigen::Map<MatrixRM<S>> gw(t.grad_accum(nw), Cin, K);
                        gw.noalias() += xm * gcolm.transpose();
                    }
                    if (nb >= 0) {
                        S* gb = t.grad_accum(nb);
                        for (int c = 0; c < Cout; ++c) {
                            gb[c] += Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(
                                         gn + static_cast<std::int64_t>(c) * OH * OW,
                                         static_cast<std::int64_t>(OH) * OW)
                                         .sum();
                        }
                    }
                }
            }),
            tape->id());
    }
    return out;
}

}  // namespace ganseg
