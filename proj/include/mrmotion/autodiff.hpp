#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "mrmotion/metrics.hpp"
#include "mrmotion/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Reverse-mode primitives. Every op records onto the implicit tape with a
// closed-form backward rule; all rules are exercised against central finite
// differences by the gradcheck suite.
namespace mrmotion::ad {

enum class Mode { Train, Eval };

namespace shape_checks {

template <class T>
inline void require_rank(const Tensor<T>& t, size_t rank, const char* op) {
    if (t.shape().size() != rank)
        throw ValidationError(std::string(op) + ": expected rank " + std::to_string(rank) +
                              " tensor, got rank " + std::to_string(t.shape().size()));
}

template <class T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ValidationError(std::string(op) + ": shape mismatch");
}

} // namespace shape_checks

// ---- elementwise ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    shape_checks::require_same_shape(a, b, "add");
    auto n = make_node<T>(a.shape(), {a.node(), b.node()});
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
    n->backprop = [](Node<T>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[static_cast<size_t>(k)];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    };
    debug_check_finite(*n);
    return Tensor<T>(n);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    shape_checks::require_same_shape(a, b, "mul");
    auto n = make_node<T>(a.shape(), {a.node(), b.node()});
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * bv[i];
    n->backprop = [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
        }
    };
    debug_check_finite(*n);
    return Tensor<T>(n);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    auto n = make_node<T>(a.shape(), {a.node()});
    const auto& av = a.value();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = c * av[i];
    n->backprop = [c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
    };
    return Tensor<T>(n);
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    auto n = make_node<T>(a.shape(), {a.node()});
    const auto& av = a.value();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] > T(0) ? av[i] : T(0);
    n->backprop = [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (p.value[i] > T(0)) p.grad[i] += self.grad[i];
    };
    return Tensor<T>(n);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto n = make_node<T>(a.shape(), {a.node()});
    const auto& av = a.value();
    for (size_t i = 0; i < av.size(); ++i)
        n->value[i] = T(1) / (T(1) + std::exp(-av[i]));
    n->backprop = [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T s = self.value[i];
            p.grad[i] += self.grad[i] * s * (T(1) - s);
        }
    };
    debug_check_finite(*n);
    return Tensor<T>(n);
}

// ---- convolution ----

// Odd square kernel, stride 1, zero "same" padding: spatial dims preserved.
// x [N,Cin,H,W], w [Cout,Cin,K,K], b [Cout] -> [N,Cout,H,W].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    shape_checks::require_rank(x, 4, "conv2d");
    shape_checks::require_rank(w, 4, "conv2d");
    shape_checks::require_rank(b, 1, "conv2d");
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0), K = w.dim(2);
    if (w.dim(1) != Cin) throw ValidationError("conv2d: w in-channels mismatch");
    if (w.dim(3) != K || K % 2 == 0) throw ValidationError("conv2d: kernel must be odd square");
    if (b.dim(0) != Cout) throw ValidationError("conv2d: bias length mismatch");
    const int64_t P = K / 2;

    auto n = make_node<T>({N, Cout, H, W}, {x.node(), w.node(), b.node()});
    const T* xv = x.value().data();
    const T* wv = w.value().data();
    const T* bv = b.value().data();
    T* yv = n->value.data();

    const bool seq = sequential_mode().load();
#pragma omp parallel for collapse(2) schedule(static) if (!seq)
    for (int64_t ni = 0; ni < N; ++ni) {
        for (int64_t co = 0; co < Cout; ++co) {
            T* yplane = yv + (ni * Cout + co) * H * W;
            const T bias = bv[co];
            for (int64_t i = 0; i < H * W; ++i) yplane[i] = bias;
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* xplane = xv + (ni * Cin + ci) * H * W;
                for (int64_t kh = 0; kh < K; ++kh) {
                    const int64_t dy = kh - P;
                    const int64_t h0 = std::max<int64_t>(0, -dy);
                    const int64_t h1 = std::min<int64_t>(H, H - dy);
                    for (int64_t kw = 0; kw < K; ++kw) {
                        const T alpha = wv[((co * Cin + ci) * K + kh) * K + kw];
                        const int64_t dx = kw - P;
                        const int64_t w0 = std::max<int64_t>(0, -dx);
                        const int64_t w1 = std::min<int64_t>(W, W - dx);
                        if (w1 <= w0) continue;
                        for (int64_t h = h0; h < h1; ++h) {
                            const T* xrow = xplane + (h + dy) * W + (w0 + dx);
                            T* yrow = yplane + h * W + w0;
                            const int64_t len = w1 - w0;
                            for (int64_t i = 0; i < len; ++i) yrow[i] += alpha * xrow[i];
                        }
                    }
                }
            }
        }
    }

    n->backprop = [N, Cin, Cout, H, W, K, P, seq](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gy = self.grad.data();
        const T* xv2 = px.value.data();
        const T* wv2 = pw.value.data();

        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t co = 0; co < Cout; ++co) {
                T acc = T(0);
                for (int64_t ni = 0; ni < N; ++ni) {
                    const T* gplane = gy + (ni * Cout + co) * H * W;
                    for (int64_t i = 0; i < H * W; ++i) acc += gplane[i];
                }
                pb.grad[co] += acc;
            }
        }

        if (pw.requires_grad) {
            pw.ensure_grad();
            T* gw = pw.grad.data();
#pragma omp parallel for collapse(2) schedule(static) if (!seq)
            for (int64_t co = 0; co < Cout; ++co) {
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    for (int64_t kh = 0; kh < K; ++kh) {
                        const int64_t dy = kh - P;
                        const int64_t h0 = std::max<int64_t>(0, -dy);
                        const int64_t h1 = std::min<int64_t>(H, H - dy);
                        for (int64_t kw = 0; kw < K; ++kw) {
                            const int64_t dx = kw - P;
                            const int64_t w0 = std::max<int64_t>(0, -dx);
                            const int64_t w1 = std::min<int64_t>(W, W - dx);
                            if (w1 <= w0) continue;
                            T acc = T(0);
                            for (int64_t ni = 0; ni < N; ++ni) {
                                const T* xplane = xv2 + (ni * Cin + ci) * H * W;
                                const T* gplane = gy + (ni * Cout + co) * H * W;
                                for (int64_t h = h0; h < h1; ++h) {
                                    const T* xrow = xplane + (h + dy) * W + (w0 + dx);
                                    const T* grow = gplane + h * W + w0;
                                    const int64_t len = w1 - w0;
                                    for (int64_t i = 0; i < len; ++i) acc += xrow[i] * grow[i];
                                }
                            }
                            gw[((co * Cin + ci) * K + kh) * K + kw] += acc;
                        }
                    }
                }
            }
        }

        if (px.requires_grad) {
            px.ensure_grad();
            T* gx = px.grad.data();
#pragma omp parallel for collapse(2) schedule(static) if (!seq)
            for (int64_t ni = 0; ni < N; ++ni) {
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    T* gxplane = gx + (ni * Cin + ci) * H * W;
                    for (int64_t co = 0; co < Cout; ++co) {
                        const T* gplane = gy + (ni * Cout + co) * H * W;
                        for (int64_t kh = 0; kh < K; ++kh) {
                            const int64_t dy = kh - P;
                            const int64_t h0 = std::max<int64_t>(0, -dy);
                            const int64_t h1 = std::min<int64_t>(H, H - dy);
                            for (int64_t kw = 0; kw < K; ++kw) {
                                const T alpha = wv2[((co * Cin + ci) * K + kh) * K + kw];
                                const int64_t dx = kw - P;
                                const int64_t w0 = std::max<int64_t>(0, -dx);
                                const int64_t w1 = std::min<int64_t>(W, W - dx);
                                if (w1 <= w0) continue;
                                for (int64_t h = h0; h < h1; ++h) {
                                    T* gxrow = gxplane + (h + dy) * W + (w0 + dx);
                                    const T* grow = gplane + h * W + w0;
                                    const int64_t len = w1 - w0;
                                    for (int64_t i = 0; i < len; ++i) gxrow[i] += alpha * grow[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    debug_check_finite(*n);
    return Tensor<T>(n);
}

// ---- pooling / resampling ----

template <class T>
Tensor<T> avg_pool_2x2(const Tensor<T>& x) {
    shape_checks::require_rank(x, 4, "avg_pool_2x2");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw ValidationError("avg_pool_2x2: H and W must be even, got " + std::to_string(H) +
                              "x" + std::to_string(W));
    const int64_t Ho = H / 2, Wo = W / 2;
    auto n = make_node<T>({N, C, Ho, Wo}, {x.node()});
    const T* xv = x.value().data();
    T* yv = n->value.data();
    for (int64_t p = 0; p < N * C; ++p) {
        const T* xp = xv + p * H * W;
        T* yp = yv + p * Ho * Wo;
        for (int64_t h = 0; h < Ho; ++h)
            for (int64_t w = 0; w < Wo; ++w)
                yp[h * Wo + w] = (xp[(2 * h) * W + 2 * w] + xp[(2 * h) * W + 2 * w + 1] +
                                  xp[(2 * h + 1) * W + 2 * w] + xp[(2 * h + 1) * W + 2 * w + 1]) *
                                 T(0.25);
    }
    n->backprop = [N, C, H, W, Ho, Wo](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T* gx = p.grad.data();
        const T* gy = self.grad.data();
        for (int64_t pl = 0; pl < N * C; ++pl) {
            T* gxp = gx + pl * H * W;
            const T* gyp = gy + pl * Ho * Wo;
            for (int64_t h = 0; h < Ho; ++h)
                for (int64_t w = 0; w < Wo; ++w) {
                    const T g = gyp[h * Wo + w] * T(0.25);
                    gxp[(2 * h) * W + 2 * w] += g;
                    gxp[(2 * h) * W + 2 * w + 1] += g;
                    gxp[(2 * h + 1) * W + 2 * w] += g;
                    gxp[(2 * h + 1) * W + 2 * w + 1] += g;
                }
        }
    };
    return Tensor<T>(n);
}

template <class T>
Tensor<T> upsample_nearest_2x(const Tensor<T>& x) {
    shape_checks::require_rank(x, 4, "upsample_nearest_2x");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = make_node<T>({N, C, 2 * H, 2 * W}, {x.node()});
    const T* xv = x.value().data();
    T* yv = n->value.data();
    for (int64_t p = 0; p < N * C; ++p) {
        const T* xp = xv + p * H * W;
        T* yp = yv + p * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const T v = xp[h * W + w];
                T* base = yp + (2 * h) * (2 * W) + 2 * w;
                base[0] = v;
                base[1] = v;
                base[2 * W] = v;
                base[2 * W + 1] = v;
            }
    }
    n->backprop = [N, C, H, W](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T* gx = p.grad.data();
        const T* gy = self.grad.data();
        for (int64_t pl = 0; pl < N * C; ++pl) {
            T* gxp = gx + pl * H * W;
            const T* gyp = gy + pl * 4 * H * W;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    const T* base = gyp + (2 * h) * (2 * W) + 2 * w;
                    gxp[h * W + w] += base[0] + base[1] + base[2 * W] + base[2 * W + 1];
                }
        }
    };
    return Tensor<T>(n);
}

// ---- channel ops ----

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ValidationError("concat_channels: empty input list");
    const int64_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    int64_t Ctot = 0;
    std::vector<NodePtr<T>> parents;
    for (const auto& x : xs) {
        shape_checks::require_rank(x, 4, "concat_channels");
        if (x.dim(0) != N || x.dim(2) != H || x.dim(3) != W)
            throw ValidationError("concat_channels: N/H/W mismatch");
        Ctot += x.dim(1);
        parents.push_back(x.node());
    }
    auto n = make_node<T>({N, Ctot, H, W}, std::move(parents));
    T* yv = n->value.data();
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t C = x.dim(1);
        const T* xv = x.value().data();
        for (int64_t ni = 0; ni < N; ++ni)
            std::copy(xv + ni * C * H * W, xv + (ni + 1) * C * H * W,
                      yv + (ni * Ctot + coff) * H * W);
        coff += C;
    }
    n->backprop = [N, Ctot, H, W](Node<T>& self) {
        int64_t coff2 = 0;
        for (auto& pp : self.parents) {
            auto& p = *pp;
            const int64_t C = p.shape[1];
            if (p.requires_grad) {
                p.ensure_grad();
                for (int64_t ni = 0; ni < N; ++ni) {
                    const T* src = self.grad.data() + (ni * Ctot + coff2) * H * W;
                    T* dst = p.grad.data() + ni * C * H * W;
                    for (int64_t i = 0; i < C * H * W; ++i) dst[i] += src[i];
                }
            }
            coff2 += C;
        }
    };
    return Tensor<T>(n);
}

// x [N,C,H,W] -> [N,1,H,W]
template <class T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    shape_checks::require_rank(x, 4, "channel_mean");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = make_node<T>({N, 1, H, W}, {x.node()});
    const T* xv = x.value().data();
    T* yv = n->value.data();
    const T inv = T(1) / static_cast<T>(C);
    for (int64_t ni = 0; ni < N; ++ni)
        for (int64_t i = 0; i < H * W; ++i) {
            T acc = T(0);
            for (int64_t c = 0; c < C; ++c) acc += xv[(ni * C + c) * H * W + i];
            yv[ni * H * W + i] = acc * inv;
        }
    n->backprop = [N, C, H, W, inv](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t ni = 0; ni < N; ++ni)
            for (int64_t i = 0; i < H * W; ++i) {
                const T g = self.grad[ni * H * W + i] * inv;
                for (int64_t c = 0; c < C; ++c) p.grad[(ni * C + c) * H * W + i] += g;
            }
    };
    return Tensor<T>(n);
}

// x [N,C,H,W] -> [N,1,H,W]; ties broken to the lowest channel index
template <class T>
Tensor<T> channel_max(const Tensor<T>& x) {
    shape_checks::require_rank(x, 4, "channel_max");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = make_node<T>({N, 1, H, W}, {x.node()});
    const T* xv = x.value().data();
    T* yv = n->value.data();
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * H * W));
    for (int64_t ni = 0; ni < N; ++ni)
        for (int64_t i = 0; i < H * W; ++i) {
            T best = xv[ni * C * H * W + i];
            int64_t bc = 0;
            for (int64_t c = 1; c < C; ++c) {
                const T v = xv[(ni * C + c) * H * W + i];
                if (v > best) {
                    best = v;
                    bc = c;
                }
            }
            yv[ni * H * W + i] = best;
            (*argmax)[static_cast<size_t>(ni * H * W + i)] = bc;
        }
    n->backprop = [N, C, H, W, argmax](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t ni = 0; ni < N; ++ni)
            for (int64_t i = 0; i < H * W; ++i) {
                const int64_t c = (*argmax)[static_cast<size_t>(ni * H * W + i)];
                p.grad[(ni * C + c) * H * W + i] += self.grad[ni * H * W + i];
            }
    };
    return Tensor<T>(n);
}

// x [N,C,H,W] -> [N,C]
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    shape_checks::require_rank(x, 4, "global_avg_pool");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = make_node<T>({N, C}, {x.node()});
    const T* xv = x.value().data();
    const T inv = T(1) / static_cast<T>(H * W);
    for (int64_t p = 0; p < N * C; ++p) {
        T acc = T(0);
        for (int64_t i = 0; i < H * W; ++i) acc += xv[p * H * W + i];
        n->value[static_cast<size_t>(p)] = acc * inv;
    }
    n->backprop = [N, C, H, W, inv](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t pl = 0; pl < N * C; ++pl) {
            const T g = self.grad[static_cast<size_t>(pl)] * inv;
            for (int64_t i = 0; i < H * W; ++i) p.grad[pl * H * W + i] += g;
        }
    };
    return Tensor<T>(n);
}

// x [N,C,H,W] -> [N,C]; gradient routes to the argmax, ties to lowest index
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    shape_checks::require_rank(x, 4, "global_max_pool");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto n = make_node<T>({N, C}, {x.node()});
    const T* xv = x.value().data();
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C));
    for (int64_t p = 0; p < N * C; ++p) {
        T best = xv[p * H * W];
        int64_t bi = 0;
        for (int64_t i = 1; i < H * W; ++i)
            if (xv[p * H * W + i] > best) {
                best = xv[p * H * W + i];
                bi = i;
            }
        n->value[static_cast<size_t>(p)] = best;
        (*argmax)[static_cast<size_t>(p)] = bi;
    }
    n->backprop = [N, C, H, W, argmax](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int64_t pl = 0; pl < N * C; ++pl)
            p.grad[pl * H * W + (*argmax)[static_cast<size_t>(pl)]] += self.grad[static_cast<size_t>(pl)];
    };
    return Tensor<T>(n);
}

// x [N,Fin], w [Fout,Fin], b [Fout] -> [N,Fout]
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    shape_checks::require_rank(x, 2, "dense");
    shape_checks::require_rank(w, 2, "dense");
    shape_checks::require_rank(b, 1, "dense");
    const int64_t N = x.dim(0), Fin = x.dim(1), Fout = w.dim(0);
    if (w.dim(1) != Fin) throw ValidationError("dense: weight in-features mismatch");
    if (b.dim(0) != Fout) throw ValidationError("dense: bias length mismatch");
    auto n = make_node<T>({N, Fout}, {x.node(), w.node(), b.node()});
    const T* xv = x.value().data();
    const T* wv = w.value().data();
    const T* bv = b.value().data();
    for (int64_t ni = 0; ni < N; ++ni)
        for (int64_t fo = 0; fo < Fout; ++fo) {
            T acc = bv[fo];
            for (int64_t fi = 0; fi < Fin; ++fi) acc += xv[ni * Fin + fi] * wv[fo * Fin + fi];
            n->value[static_cast<size_t>(ni * Fout + fo)] = acc;
        }
    n->backprop = [N, Fin, Fout](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gy = self.grad.data();
        if (px.requires_grad) {
            px.ensure_grad();
            for (int64_t ni = 0; ni < N; ++ni)
                for (int64_t fi = 0; fi < Fin; ++fi) {
                    T acc = T(0);
                    for (int64_t fo = 0; fo < Fout; ++fo)
                        acc += gy[ni * Fout + fo] * pw.value[static_cast<size_t>(fo * Fin + fi)];
                    px.grad[static_cast<size_t>(ni * Fin + fi)] += acc;
                }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (int64_t fo = 0; fo < Fout; ++fo)
                for (int64_t fi = 0; fi < Fin; ++fi) {
                    T acc = T(0);
                    for (int64_t ni = 0; ni < N; ++ni)
                        acc += gy[ni * Fout + fo] * px.value[static_cast<size_t>(ni * Fin + fi)];
                    pw.grad[static_cast<size_t>(fo * Fin + fi)] += acc;
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t fo = 0; fo < Fout; ++fo) {
                T acc = T(0);
                for (int64_t ni = 0; ni < N; ++ni) acc += gy[ni * Fout + fo];
                pb.grad[static_cast<size_t>(fo)] += acc;
            }
        }
    };
    return Tensor<T>(n);
}

// Broadcast gates used by the attention block.
// x [N,C,H,W] * g [N,C] -> [N,C,H,W]
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& g) {
    shape_checks::require_rank(x, 4, "scale_channels");
    shape_checks::require_rank(g, 2, "scale_channels");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (g.dim(0) != N || g.dim(1) != C) throw ValidationError("scale_channels: gate shape mismatch");
    auto n = make_node<T>(x.shape(), {x.node(), g.node()});
    const T* xv = x.value().data();
    const T* gv = g.value().data();
    for (int64_t p = 0; p < N * C; ++p) {
        const T gk = gv[p];
        for (int64_t i = 0; i < H * W; ++i)
            n->value[static_cast<size_t>(p * H * W + i)] = xv[p * H * W + i] * gk;
    }
    n->backprop = [N, C, H, W](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (int64_t p = 0; p < N * C; ++p) {
                const T gk = pg.value[static_cast<size_t>(p)];
                for (int64_t i = 0; i < H * W; ++i)
                    px.grad[p * H * W + i] += self.grad[p * H * W + i] * gk;
            }
        }
        if (pg.requires_grad) {
            pg.ensure_grad();
            for (int64_t p = 0; p < N * C; ++p) {
                T acc = T(0);
                for (int64_t i = 0; i < H * W; ++i)
                    acc += self.grad[p * H * W + i] * px.value[static_cast<size_t>(p * H * W + i)];
                pg.grad[static_cast<size_t>(p)] += acc;
            }
        }
    };
    return Tensor<T>(n);
}

// x [N,C,H,W] * g [N,1,H,W] -> [N,C,H,W]
template <class T>
Tensor<T> scale_spatial(const Tensor<T>& x, const Tensor<T>& g) {
    shape_checks::require_rank(x, 4, "scale_spatial");
    shape_checks::require_rank(g, 4, "scale_spatial");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (g.dim(0) != N || g.dim(1) != 1 || g.dim(2) != H || g.dim(3) != W)
        throw ValidationError("scale_spatial: gate shape mismatch");
    auto n = make_node<T>(x.shape(), {x.node(), g.node()});
    const T* xv = x.value().data();
    const T* gv = g.value().data();
    for (int64_t ni = 0; ni < N; ++ni)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < H * W; ++i)
                n->value[static_cast<size_t>((ni * C + c) * H * W + i)] =
                    xv[(ni * C + c) * H * W + i] * gv[ni * H * W + i];
    n->backprop = [N, C, H, W](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (int64_t ni = 0; ni < N; ++ni)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < H * W; ++i)
                        px.grad[(ni * C + c) * H * W + i] +=
                            self.grad[(ni * C + c) * H * W + i] * pg.value[static_cast<size_t>(ni * H * W + i)];
        }
        if (pg.requires_grad) {
            pg.ensure_grad();
            for (int64_t ni = 0; ni < N; ++ni)
                for (int64_t i = 0; i < H * W; ++i) {
                    T acc = T(0);
                    for (int64_t c = 0; c < C; ++c)
                        acc += self.grad[(ni * C + c) * H * W + i] *
                               px.value[static_cast<size_t>((ni * C + c) * H * W + i)];
                    pg.grad[static_cast<size_t>(ni * H * W + i)] += acc;
                }
        }
    };
    return Tensor<T>(n);
}

// ---- batch normalization ----

template <class T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    static BatchNormStats identity(int64_t channels) {
        BatchNormStats s;
        s.running_mean.assign(static_cast<size_t>(channels), T(0));
        s.running_var.assign(static_cast<size_t>(channels), T(1));
        return s;
    }
};

// Train mode normalizes by batch statistics (biased variance) and updates the
// running stats with momentum 0.9; eval mode normalizes by the running stats.
template <class T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormStats<T>& stats, Mode mode, T momentum = T(0.9),
                        T eps = T(1e-5)) {
    shape_checks::require_rank(x, 4, "batch_norm_2d");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.dim(0) != C || beta.dim(0) != C)
        throw ValidationError("batch_norm_2d: gamma/beta length mismatch");
    if (static_cast<int64_t>(stats.running_mean.size()) != C ||
        static_cast<int64_t>(stats.running_var.size()) != C)
        throw ValidationError("batch_norm_2d: running stats length mismatch");
    const int64_t M = N * H * W;
    if (mode == Mode::Train && M < 2)
        throw ValidationError("batch_norm_2d: train mode needs at least 2 samples per channel");

    auto n = make_node<T>(x.shape(), {x.node(), gamma.node(), beta.node()});
    const T* xv = x.value().data();
    const T* gv = gamma.value().data();
    const T* bv = beta.value().data();

    auto xhat = std::make_shared<std::vector<T>>(x.value().size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C));

    for (int64_t c = 0; c < C; ++c) {
        T mu, var;
        if (mode == Mode::Train) {
            T acc = T(0);
            for (int64_t ni = 0; ni < N; ++ni) {
                const T* plane = xv + (ni * C + c) * H * W;
                for (int64_t i = 0; i < H * W; ++i) acc += plane[i];
            }
            mu = acc / static_cast<T>(M);
            T vacc = T(0);
            for (int64_t ni = 0; ni < N; ++ni) {
                const T* plane = xv + (ni * C + c) * H * W;
                for (int64_t i = 0; i < H * W; ++i) vacc += (plane[i] - mu) * (plane[i] - mu);
            }
            var = vacc / static_cast<T>(M);
            stats.running_mean[static_cast<size_t>(c)] =
                momentum * stats.running_mean[static_cast<size_t>(c)] + (T(1) - momentum) * mu;
            stats.running_var[static_cast<size_t>(c)] =
                momentum * stats.running_var[static_cast<size_t>(c)] + (T(1) - momentum) * var;
        } else {
            mu = stats.running_mean[static_cast<size_t>(c)];
            var = stats.running_var[static_cast<size_t>(c)];
        }
        const T istd = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(c)] = istd;
        (*mean)[static_cast<size_t>(c)] = mu;
        for (int64_t ni = 0; ni < N; ++ni) {
            const T* plane = xv + (ni * C + c) * H * W;
            T* xh = xhat->data() + (ni * C + c) * H * W;
            T* yplane = n->value.data() + (ni * C + c) * H * W;
            const T g = gv[c], b = bv[c];
            for (int64_t i = 0; i < H * W; ++i) {
                xh[i] = (plane[i] - mu) * istd;
                yplane[i] = g * xh[i] + b;
            }
        }
    }

    const bool train = mode == Mode::Train;
    n->backprop = [N, C, H, W, M, xhat, inv_std, train](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gy = self.grad.data();

        if (pg.requires_grad) {
            pg.ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                T acc = T(0);
                for (int64_t ni = 0; ni < N; ++ni) {
                    const int64_t off = (ni * C + c) * H * W;
                    for (int64_t i = 0; i < H * W; ++i)
                        acc += gy[off + i] * (*xhat)[static_cast<size_t>(off + i)];
                }
                pg.grad[static_cast<size_t>(c)] += acc;
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                T acc = T(0);
                for (int64_t ni = 0; ni < N; ++ni) {
                    const int64_t off = (ni * C + c) * H * W;
                    for (int64_t i = 0; i < H * W; ++i) acc += gy[off + i];
                }
                pb.grad[static_cast<size_t>(c)] += acc;
            }
        }
        if (px.requires_grad) {
            px.ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                const T g = pg.value[static_cast<size_t>(c)];
                const T istd = (*inv_std)[static_cast<size_t>(c)];
                if (!train) {
                    for (int64_t ni = 0; ni < N; ++ni) {
                        const int64_t off = (ni * C + c) * H * W;
                        for (int64_t i = 0; i < H * W; ++i)
                            px.grad[off + i] += gy[off + i] * g * istd;
                    }
                } else {
                    // dx = g*istd/M * (M*dyh - sum(dyh) - xhat*sum(dyh*xhat))
                    T sum_dy = T(0), sum_dy_xhat = T(0);
                    for (int64_t ni = 0; ni < N; ++ni) {
                        const int64_t off = (ni * C + c) * H * W;
                        for (int64_t i = 0; i < H * W; ++i) {
                            sum_dy += gy[off + i];
                            sum_dy_xhat += gy[off + i] * (*xhat)[static_cast<size_t>(off + i)];
                        }
                    }
                    const T k = g * istd / static_cast<T>(M);
                    for (int64_t ni = 0; ni < N; ++ni) {
                        const int64_t off = (ni * C + c) * H * W;
                        for (int64_t i = 0; i < H * W; ++i) {
                            const T xh = (*xhat)[static_cast<size_t>(off + i)];
                            px.grad[off + i] +=
                                k * (static_cast<T>(M) * gy[off + i] - sum_dy - xh * sum_dy_xhat);
                        }
                    }
                }
            }
        }
    };
    debug_check_finite(*n);
    return Tensor<T>(n);
}

// ---- differentiable SSIM loss ----

// 1 - mean windowed SSIM over all (n,c) maps; value in [0,2]. The forward
// pass matches metrics::ssim exactly (same window, same border
// renormalization); the backward rule is analytic and finite-difference
// checked by the gradcheck suite.
template <class T>
Tensor<T> ssim_loss(const Tensor<T>& pred, const Tensor<T>& target,
                    const metrics::SsimParams& p = {}) {
    shape_checks::require_rank(pred, 4, "ssim_loss");
    shape_checks::require_same_shape(pred, target, "ssim_loss");
    p.validate();
    const int64_t N = pred.dim(0), C = pred.dim(1), H = pred.dim(2), W = pred.dim(3);
    if (H < p.window || W < p.window)
        throw ValidationError("ssim_loss: image smaller than the window");

    namespace md = metrics::detail;
    const auto g = md::gaussian_window(p.window, p.sigma);
    const auto z = md::renorm_field(W, H, g);
    const double c1 = (p.k1 * p.L) * (p.k1 * p.L);
    const double c2 = (p.k2 * p.L) * (p.k2 * p.L);
    const size_t plane = static_cast<size_t>(H * W);

    auto n = make_node<T>({1}, {pred.node(), target.node()});

    KahanSum total;
    const T* pv = pred.value().data();
    const T* tv = target.value().data();
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    std::vector<double> mx(plane), my(plane), ex2(plane), ey2(plane), exy(plane);
    for (int64_t pc = 0; pc < N * C; ++pc) {
        const T* xp = pv + pc * H * W;
        const T* yp = tv + pc * H * W;
        for (size_t i = 0; i < plane; ++i) {
            x[i] = static_cast<double>(xp[i]);
            y[i] = static_cast<double>(yp[i]);
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        md::corr2_zero(x.data(), mx.data(), W, H, g);
        md::corr2_zero(y.data(), my.data(), W, H, g);
        md::corr2_zero(xx.data(), ex2.data(), W, H, g);
        md::corr2_zero(yy.data(), ey2.data(), W, H, g);
        md::corr2_zero(xy.data(), exy.data(), W, H, g);
        for (size_t i = 0; i < plane; ++i) {
            const double mux = mx[i] / z[i], muy = my[i] / z[i];
            const double vx = ex2[i] / z[i] - mux * mux;
            const double vy = ey2[i] / z[i] - muy * muy;
            const double cxy = exy[i] / z[i] - mux * muy;
            const double num = (2.0 * mux * muy + c1) * (2.0 * cxy + c2);
            const double den = (mux * mux + muy * muy + c1) * (vx + vy + c2);
            total.add(num / den);
        }
    }
    const double mean_ssim = total.sum() / static_cast<double>(N * C * H * W);
    n->value[0] = static_cast<T>(1.0 - mean_ssim);

    n->backprop = [N, C, H, W, g, z, c1, c2, plane](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& py = *self.parents[1];
        if (!px.requires_grad && !py.requires_grad) return;
        if (px.requires_grad) px.ensure_grad();
        if (py.requires_grad) py.ensure_grad();
        const double upstream = static_cast<double>(self.grad[0]);
        // d(loss)/d(ssim_p) = -1 / (total map size)
        const double u = -upstream / static_cast<double>(N * C * H * W);

        std::vector<double> x(plane), y(plane), buf(plane);
        std::vector<double> mx(plane), my(plane), ex2(plane), ey2(plane), exy(plane);
        std::vector<double> fa(plane), fa2(plane), fb(plane), fc(plane);
        std::vector<double> ca(plane), ca2(plane), cb(plane), cbmx(plane), cbmy(plane),
            cc(plane), ccmx(plane), ccmy(plane);
        namespace md = metrics::detail;

        for (int64_t pc = 0; pc < N * C; ++pc) {
            const T* xp = px.value.data() + pc * H * W;
            const T* yp = py.value.data() + pc * H * W;
            for (size_t i = 0; i < plane; ++i) {
                x[i] = static_cast<double>(xp[i]);
                y[i] = static_cast<double>(yp[i]);
            }
            for (size_t i = 0; i < plane; ++i) buf[i] = x[i] * x[i];
            md::corr2_zero(buf.data(), ex2.data(), W, H, g);
            for (size_t i = 0; i < plane; ++i) buf[i] = y[i] * y[i];
            md::corr2_zero(buf.data(), ey2.data(), W, H, g);
            for (size_t i = 0; i < plane; ++i) buf[i] = x[i] * y[i];
            md::corr2_zero(buf.data(), exy.data(), W, H, g);
            md::corr2_zero(x.data(), mx.data(), W, H, g);
            md::corr2_zero(y.data(), my.data(), W, H, g);

            // per-window partials: fa = ds/dmu_x (direct), fa2 = ds/dmu_y,
            // fb = ds/dvar, fc = ds/dcov; all divided by Z for the adjoint
            for (size_t i = 0; i < plane; ++i) {
                const double mux = mx[i] / z[i], muy = my[i] / z[i];
                const double vx = ex2[i] / z[i] - mux * mux;
                const double vy = ey2[i] / z[i] - muy * muy;
                const double cxy = exy[i] / z[i] - mux * muy;
                const double n1 = 2.0 * mux * muy + c1;
                const double n2 = 2.0 * cxy + c2;
                const double d1 = mux * mux + muy * muy + c1;
                const double d2 = vx + vy + c2;
                const double A = 2.0 * n2 * (muy * d1 - mux * n1) / (d1 * d1 * d2);
                const double A2 = 2.0 * n2 * (mux * d1 - muy * n1) / (d1 * d1 * d2);
                const double B = -n1 * n2 / (d1 * d2 * d2);
                const double Cc = 2.0 * n1 / (d1 * d2);
                fa[i] = A / z[i];
                fa2[i] = A2 / z[i];
                fb[i] = B / z[i];
                fc[i] = Cc / z[i];
                mx[i] = mux; // reuse as mu fields below
                my[i] = muy;
            }
            md::corr2_zero(fa.data(), ca.data(), W, H, g);
            md::corr2_zero(fa2.data(), ca2.data(), W, H, g);
            md::corr2_zero(fb.data(), cb.data(), W, H, g);
            md::corr2_zero(fc.data(), cc.data(), W, H, g);
            for (size_t i = 0; i < plane; ++i) buf[i] = fb[i] * mx[i];
            md::corr2_zero(buf.data(), cbmx.data(), W, H, g);
            for (size_t i = 0; i < plane; ++i) buf[i] = fb[i] * my[i];
            md::corr2_zero(buf.data(), cbmy.data(), W, H, g);
            for (size_t i = 0; i < plane; ++i) buf[i] = fc[i] * mx[i];
            md::corr2_zero(buf.data(), ccmx.data(), W, H, g);
            for (size_t i = 0; i < plane; ++i) buf[i] = fc[i] * my[i];
            md::corr2_zero(buf.data(), ccmy.data(), W, H, g);

            if (px.requires_grad) {
                T* gx = px.grad.data() + pc * H * W;
                for (size_t i = 0; i < plane; ++i) {
                    const double gv = ca[i] + 2.0 * x[i] * cb[i] - 2.0 * cbmx[i] +
                                      y[i] * cc[i] - ccmy[i];
                    gx[i] += static_cast<T>(u * gv);
                }
            }
            if (py.requires_grad) {
                T* gy = py.grad.data() + pc * H * W;
                for (size_t i = 0; i < plane; ++i) {
                    const double gv = ca2[i] + 2.0 * y[i] * cb[i] - 2.0 * cbmy[i] +
                                      x[i] * cc[i] - ccmx[i];
                    gy[i] += static_cast<T>(u * gv);
                }
            }
        }
    };
    return Tensor<T>(n);
}

// ---- optimizer ----

// Standard Adam with bias correction; beta/eps defaults are the community
// values, the step counter is shared across parameters.
template <class T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, std::vector<T>> m;
    std::map<std::string, std::vector<T>> v;
};

template <class T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& state,
               double lr) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (auto& [name, tensor] : params) {
        auto& value = tensor.value();
        auto& grad = tensor.grad();
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != value.size()) m.assign(value.size(), T(0));
        if (v.size() != value.size()) v.assign(value.size(), T(0));
        for (size_t i = 0; i < value.size(); ++i) {
            const double gi = static_cast<double>(grad[i]);
            const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            value[i] = static_cast<T>(static_cast<double>(value[i]) -
                                      lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

// Continuous exponential decay reaching lr0/10 at the final epoch:
// lr(e) = lr0 * 10^(-e/(total-1)).
inline double lr_schedule(int64_t epoch, double lr0 = 1e-3, int64_t total = 50) {
    if (total <= 1) return lr0;
    return lr0 * std::pow(10.0, -static_cast<double>(epoch) / static_cast<double>(total - 1));
}

} // namespace mrmotion::ad
