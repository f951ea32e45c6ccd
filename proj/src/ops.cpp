#include "osnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace osnet {
namespace {

// Row-major accumulating GEMM kernels. All three keep a fixed summation
// order, which the determinism contract relies on.

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        double* c = C + static_cast<std::size_t>(m) * N;
        const double* a = A + static_cast<std::size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) {
                c[n] += av * b[n];
            }
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
void gemm_tn(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int k = 0; k < K; ++k) {
        const double* a = A + static_cast<std::size_t>(k) * M;
        const double* b = B + static_cast<std::size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const double av = a[m];
            double* c = C + static_cast<std::size_t>(m) * N;
            for (int n = 0; n < N; ++n) {
                c[n] += av * b[n];
            }
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* a = A + static_cast<std::size_t>(m) * K;
        double* c = C + static_cast<std::size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* b = B + static_cast<std::size_t>(n) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) {
                s += a[k] * b[k];
            }
            c[n] += s;
        }
    }
}

void require_4d(const Tensor& t, const char* what) {
    if (t.ndim() != 4) {
        throw DimensionError(std::string(what) + " must be rank 4, got " +
                             shape_str(t.shape()));
    }
}

bool is_channel_vec(const Shape& big, const Shape& small) {
    return big.size() == 4 && small.size() == 4 && small[0] == big[0] &&
           small[1] == big[1] && small[2] == 1 && small[3] == 1;
}

enum class Broadcast { Same, ScalarB, ChannelB };

// Canonicalises so that `b` is the broadcast (smaller) operand.
Broadcast classify(Tensor& a, Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.numel() == 1) return Broadcast::ScalarB;
    if (a.numel() == 1) {
        std::swap(a, b);
        return Broadcast::ScalarB;
    }
    if (is_channel_vec(a.shape(), b.shape())) return Broadcast::ChannelB;
    if (is_channel_vec(b.shape(), a.shape())) {
        std::swap(a, b);
        return Broadcast::ChannelB;
    }
    throw DimensionError("operands not broadcast-compatible: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

bool tracking(const Tensor& t) { return Tape::active() != nullptr && t.requires_grad(); }

Tensor make_output(Shape shape, bool track) {
    Tensor out(std::move(shape));
    if (track) out.set_requires_grad(true);
    return out;
}

void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int OH,
            int OW, double* cols) {
    // cols is [C*k*k, OH*OW], row index ((c*k + ki)*k + kj)
    for (int c = 0; c < C; ++c) {
        const double* xc = x + static_cast<std::size_t>(c) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                double* row = cols + (static_cast<std::size_t>(c) * k * k + ki * k + kj) *
                                         OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride + ki - pad;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride + kj - pad;
                        row[oh * OW + ow] = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                                ? xc[ih * W + iw]
                                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int C, int H, int W, int k, int stride, int pad,
                int OH, int OW, double* dx) {
    for (int c = 0; c < C; ++c) {
        double* xc = dx + static_cast<std::size_t>(c) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const double* row =
                    cols + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride + kj - pad;
                        if (iw < 0 || iw >= W) continue;
                        xc[ih * W + iw] += row[oh * OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor add(const Tensor& a_in, const Tensor& b_in) {
    Tensor a = a_in, b = b_in;
    const Broadcast mode = classify(a, b);
    const bool track = tracking(a) || tracking(b);
    Tensor out = make_output(a.shape(), track);

    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::size_t n = a.numel();

    switch (mode) {
        case Broadcast::Same:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
            break;
        case Broadcast::ScalarB: {
            const double bv = pb[0];
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + bv;
            break;
        }
        case Broadcast::ChannelB: {
            const int N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c) {
                    const double bv = pb[nn * C + c];
                    const double* src = pa + (static_cast<std::size_t>(nn) * C + c) * HW;
                    double* dst = po + (static_cast<std::size_t>(nn) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) dst[i] = src[i] + bv;
                }
            break;
        }
    }

    if (track) {
        Tape::record([a, b, out, mode]() mutable {
            const double* g = out.grad_data();
            const std::size_t n = out.numel();
            if (a.requires_grad()) {
                double* da = a.grad_data();
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (b.requires_grad()) {
                double* db = b.grad_data();
                switch (mode) {
                    case Broadcast::Same:
                        for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
                        break;
                    case Broadcast::ScalarB: {
                        double s = 0.0;
                        for (std::size_t i = 0; i < n; ++i) s += g[i];
                        db[0] += s;
                        break;
                    }
                    case Broadcast::ChannelB: {
                        const int N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
                        for (int nn = 0; nn < N; ++nn)
                            for (int c = 0; c < C; ++c) {
                                const double* src =
                                    g + (static_cast<std::size_t>(nn) * C + c) * HW;
                                double s = 0.0;
                                for (int i = 0; i < HW; ++i) s += src[i];
                                db[nn * C + c] += s;
                            }
                        break;
                    }
                }
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a_in, const Tensor& b_in) {
    Tensor a = a_in, b = b_in;
    const Broadcast mode = classify(a, b);
    const bool track = tracking(a) || tracking(b);
    Tensor out = make_output(a.shape(), track);

    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    const std::size_t n = a.numel();

    switch (mode) {
        case Broadcast::Same:
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
            break;
        case Broadcast::ScalarB: {
            const double bv = pb[0];
            for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * bv;
            break;
        }
        case Broadcast::ChannelB: {
            const int N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
            for (int nn = 0; nn < N; ++nn)
                for (int c = 0; c < C; ++c) {
                    const double bv = pb[nn * C + c];
                    const double* src = pa + (static_cast<std::size_t>(nn) * C + c) * HW;
                    double* dst = po + (static_cast<std::size_t>(nn) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) dst[i] = src[i] * bv;
                }
            break;
        }
    }

    if (track) {
        Tape::record([a, b, out, mode]() mutable {
            const double* g = out.grad_data();
            const double* pa = a.data();
            const double* pb = b.data();
            const std::size_t n = out.numel();
            switch (mode) {
                case Broadcast::Same: {
                    if (a.requires_grad()) {
                        double* da = a.grad_data();
                        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * pb[i];
                    }
                    if (b.requires_grad()) {
                        double* db = b.grad_data();
                        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * pa[i];
                    }
                    break;
                }
                case Broadcast::ScalarB: {
                    if (a.requires_grad()) {
                        double* da = a.grad_data();
                        const double bv = pb[0];
                        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bv;
                    }
                    if (b.requires_grad()) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < n; ++i) s += g[i] * pa[i];
                        b.grad_data()[0] += s;
                    }
                    break;
                }
                case Broadcast::ChannelB: {
                    const int N = a.dim(0), C = a.dim(1), HW = a.dim(2) * a.dim(3);
                    double* da = a.requires_grad() ? a.grad_data() : nullptr;
                    double* db = b.requires_grad() ? b.grad_data() : nullptr;
                    for (int nn = 0; nn < N; ++nn)
                        for (int c = 0; c < C; ++c) {
                            const std::size_t base =
                                (static_cast<std::size_t>(nn) * C + c) * HW;
                            const double bv = pb[nn * C + c];
                            double s = 0.0;
                            for (int i = 0; i < HW; ++i) {
                                const double gv = g[base + i];
                                if (da) da[base + i] += gv * bv;
                                s += gv * pa[base + i];
                            }
                            if (db) db[nn * C + c] += s;
                        }
                    break;
                }
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    const bool track = tracking(a);
    Tensor out = make_output(a.shape(), track);
    const double* pa = a.data();
    double* po = out.data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * factor;
    if (track) {
        Tensor a_c = a;
        Tape::record([a_c, out, factor]() mutable {
            const double* g = out.grad_data();
            double* da = a_c.grad_data();
            const std::size_t n = out.numel();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * factor;
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    const bool track = tracking(x);
    Tensor out = make_output(x.shape(), track);
    const double* px = x.data();
    double* po = out.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
    if (track) {
        Tensor x_c = x;
        Tape::record([x_c, out]() mutable {
            const double* g = out.grad_data();
            const double* px = x_c.data();
            double* dx = x_c.grad_data();
            const std::size_t n = out.numel();
            for (std::size_t i = 0; i < n; ++i)
                if (px[i] > 0.0) dx[i] += g[i];
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    const bool track = tracking(x);
    Tensor out = make_output(x.shape(), track);
    const double* px = x.data();
    double* po = out.data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-px[i]));
    if (track) {
        Tensor x_c = x;
        Tape::record([x_c, out]() mutable {
            const double* g = out.grad_data();
            const double* po = out.data();
            double* dx = x_c.grad_data();
            const std::size_t n = out.numel();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * po[i] * (1.0 - po[i]);
        });
    }
    return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    require_4d(input, "conv2d input");
    require_4d(kernel, "conv2d kernel");
    if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
    if (padding < 0) throw DimensionError("conv2d padding must be >= 0");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = kernel.dim(0), Ck = kernel.dim(1), kh = kernel.dim(2),
              kw = kernel.dim(3);
    if (kh != kw) throw DimensionError("conv2d kernel must be square");
    if (Ck != C) {
        throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                             " vs kernel " + shape_str(kernel.shape()));
    }
    const int k = kh;
    const int OH = (H + 2 * padding - k) / stride + 1;
    const int OW = (W + 2 * padding - k) / stride + 1;
    if (H + 2 * padding < k || W + 2 * padding < k || OH < 1 || OW < 1) {
        throw DimensionError("conv2d kernel larger than padded input");
    }

    const bool track = tracking(input) || tracking(kernel);
    Tensor out = make_output({N, Co, OH, OW}, track);

    const double* px = input.data();
    const double* pw = kernel.data();
    double* po = out.data();
    const int HW = H * W;
    const int OHW = OH * OW;

    if (k == 1 && stride == 1 && padding == 0) {
        // Pointwise: out_n = W[Co,C] * x_n[C,HW], no im2col buffer needed.
        for (int n = 0; n < N; ++n) {
            gemm_nn(pw, px + static_cast<std::size_t>(n) * C * HW,
                    po + static_cast<std::size_t>(n) * Co * OHW, Co, C, OHW);
        }
        if (track) {
            Tensor x_c = input, w_c = kernel, out_c = out;
            Tape::record([x_c, w_c, out_c]() mutable {
                const int N = x_c.dim(0), C = x_c.dim(1);
                const int HW = x_c.dim(2) * x_c.dim(3);
                const int Co = w_c.dim(0);
                const double* g = out_c.grad_data();
                for (int n = 0; n < N; ++n) {
                    const double* gn = g + static_cast<std::size_t>(n) * Co * HW;
                    if (w_c.requires_grad()) {
                        gemm_nt(gn, x_c.data() + static_cast<std::size_t>(n) * C * HW,
                                w_c.grad_data(), Co, HW, C);
                    }
                    if (x_c.requires_grad()) {
                        gemm_tn(w_c.data(), gn,
                                x_c.grad_data() + static_cast<std::size_t>(n) * C * HW, C,
                                Co, HW);
                    }
                }
            });
        }
        return out;
    }

    const int CKK = C * k * k;
    auto cols = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(N) * CKK * OHW);
    for (int n = 0; n < N; ++n) {
        double* cn = cols->data() + static_cast<std::size_t>(n) * CKK * OHW;
        im2col(px + static_cast<std::size_t>(n) * C * HW, C, H, W, k, stride, padding, OH,
               OW, cn);
        gemm_nn(pw, cn, po + static_cast<std::size_t>(n) * Co * OHW, Co, CKK, OHW);
    }

    if (track) {
        Tensor x_c = input, w_c = kernel, out_c = out;
        Tape::record([x_c, w_c, out_c, cols, k, stride, padding, OH, OW]() mutable {
            const int N = x_c.dim(0), C = x_c.dim(1), H = x_c.dim(2), W = x_c.dim(3);
            const int Co = w_c.dim(0);
            const int CKK = C * k * k;
            const int OHW = OH * OW;
            const double* g = out_c.grad_data();
            std::vector<double> dcols(static_cast<std::size_t>(CKK) * OHW);
            for (int n = 0; n < N; ++n) {
                const double* gn = g + static_cast<std::size_t>(n) * Co * OHW;
                const double* cn = cols->data() + static_cast<std::size_t>(n) * CKK * OHW;
                if (w_c.requires_grad()) {
                    gemm_nt(gn, cn, w_c.grad_data(), Co, OHW, CKK);
                }
                if (x_c.requires_grad()) {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    gemm_tn(w_c.data(), gn, dcols.data(), CKK, Co, OHW);
                    col2im_add(dcols.data(), C, H, W, k, stride, padding, OH, OW,
                               x_c.grad_data() + static_cast<std::size_t>(n) * C * H * W);
                }
            }
        });
    } else {
        cols.reset();
    }
    return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, int stride,
                        int padding) {
    require_4d(input, "depthwise_conv2d input");
    require_4d(kernel, "depthwise_conv2d kernel");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Co = kernel.dim(0), mult = kernel.dim(1), kh = kernel.dim(2),
              kw = kernel.dim(3);
    if (Co != C || mult != 1 || kh != kw) {
        throw DimensionError("depthwise kernel must be [C,1,k,k] with C = input channels, got " +
                             shape_str(kernel.shape()) + " for input " +
                             shape_str(input.shape()));
    }
    const int k = kh;
    const int OH = (H + 2 * padding - k) / stride + 1;
    const int OW = (W + 2 * padding - k) / stride + 1;
    if (H + 2 * padding < k || W + 2 * padding < k || OH < 1 || OW < 1) {
        throw DimensionError("depthwise kernel larger than padded input");
    }

    const bool track = tracking(input) || tracking(kernel);
    Tensor out = make_output({N, C, OH, OW}, track);

    const double* px = input.data();
    const double* pw = kernel.data();
    double* po = out.data();
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* xc = px + (static_cast<std::size_t>(n) * C + c) * H * W;
            const double* wc = pw + static_cast<std::size_t>(c) * k * k;
            double* oc = po + (static_cast<std::size_t>(n) * C + c) * OH * OW;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow) {
                    double s = 0.0;
                    for (int ki = 0; ki < k; ++ki) {
                        const int ih = oh * stride + ki - padding;
                        if (ih < 0 || ih >= H) continue;
                        for (int kj = 0; kj < k; ++kj) {
                            const int iw = ow * stride + kj - padding;
                            if (iw < 0 || iw >= W) continue;
                            s += xc[ih * W + iw] * wc[ki * k + kj];
                        }
                    }
                    oc[oh * OW + ow] = s;
                }
            }
        }
    }

    if (track) {
        Tensor x_c = input, w_c = kernel, out_c = out;
        Tape::record([x_c, w_c, out_c, k, stride, padding]() mutable {
            const int N = x_c.dim(0), C = x_c.dim(1), H = x_c.dim(2), W = x_c.dim(3);
            const int OH = out_c.dim(2), OW = out_c.dim(3);
            const double* g = out_c.grad_data();
            const double* px = x_c.data();
            const double* pw = w_c.data();
            double* dx = x_c.requires_grad() ? x_c.grad_data() : nullptr;
            double* dw = w_c.requires_grad() ? w_c.grad_data() : nullptr;
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * H * W;
                    const double* gc =
                        g + (static_cast<std::size_t>(n) * C + c) * OH * OW;
                    const double* wc = pw + static_cast<std::size_t>(c) * k * k;
                    for (int oh = 0; oh < OH; ++oh) {
                        for (int ow = 0; ow < OW; ++ow) {
                            const double gv = gc[oh * OW + ow];
                            if (gv == 0.0) continue;
                            for (int ki = 0; ki < k; ++ki) {
                                const int ih = oh * stride + ki - padding;
                                if (ih < 0 || ih >= H) continue;
                                for (int kj = 0; kj < k; ++kj) {
                                    const int iw = ow * stride + kj - padding;
                                    if (iw < 0 || iw >= W) continue;
                                    if (dw)
                                        dw[c * k * k + ki * k + kj] +=
                                            gv * px[xoff + ih * W + iw];
                                    if (dx) dx[xoff + ih * W + iw] += gv * wc[ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor pointwise_conv2d(const Tensor& input, const Tensor& kernel) {
    require_4d(kernel, "pointwise kernel");
    if (kernel.dim(2) != 1 || kernel.dim(3) != 1) {
        throw DimensionError("pointwise kernel must be [C',C,1,1], got " +
                             shape_str(kernel.shape()));
    }
    return conv2d(input, kernel, 1, 0);
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
    require_4d(x, "max_pool2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = (H + 2 * padding - kernel) / stride + 1;
    const int OW = (W + 2 * padding - kernel) / stride + 1;
    if (H + 2 * padding < kernel || W + 2 * padding < kernel || OH < 1 || OW < 1) {
        throw DimensionError("max_pool2d window larger than padded input");
    }
    const bool track = tracking(x);
    Tensor out = make_output({N, C, OH, OW}, track);
    auto argmax = std::make_shared<std::vector<int>>(out.numel());

    const double* px = x.data();
    double* po = out.data();
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xc = px + (static_cast<std::size_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_idx = -1;
                    for (int ki = 0; ki < kernel; ++ki) {
                        const int ih = oh * stride + ki - padding;
                        if (ih < 0 || ih >= H) continue;
                        for (int kj = 0; kj < kernel; ++kj) {
                            const int iw = ow * stride + kj - padding;
                            if (iw < 0 || iw >= W) continue;
                            const double v = xc[ih * W + iw];
                            if (v > best) {
                                best = v;
                                best_idx = ih * W + iw;
                            }
                        }
                    }
                    po[oi] = best;
                    (*argmax)[oi] =
                        best_idx + static_cast<int>((static_cast<std::size_t>(n) * C + c) *
                                                    H * W);
                }
        }

    if (track) {
        Tensor x_c = x, out_c = out;
        Tape::record([x_c, out_c, argmax]() mutable {
            const double* g = out_c.grad_data();
            double* dx = x_c.grad_data();
            const std::size_t n = out_c.numel();
            for (std::size_t i = 0; i < n; ++i) dx[(*argmax)[i]] += g[i];
        });
    }
    return out;
}

Tensor avg_pool2d(const Tensor& x, int kernel, int stride, int padding) {
    require_4d(x, "avg_pool2d input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = (H + 2 * padding - kernel) / stride + 1;
    const int OW = (W + 2 * padding - kernel) / stride + 1;
    if (H + 2 * padding < kernel || W + 2 * padding < kernel || OH < 1 || OW < 1) {
        throw DimensionError("avg_pool2d window larger than padded input");
    }
    const double inv = 1.0 / (kernel * kernel);
    const bool track = tracking(x);
    Tensor out = make_output({N, C, OH, OW}, track);

    const double* px = x.data();
    double* po = out.data();
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xc = px + (static_cast<std::size_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    double s = 0.0;
                    for (int ki = 0; ki < kernel; ++ki) {
                        const int ih = oh * stride + ki - padding;
                        if (ih < 0 || ih >= H) continue;
                        for (int kj = 0; kj < kernel; ++kj) {
                            const int iw = ow * stride + kj - padding;
                            if (iw < 0 || iw >= W) continue;
                            s += xc[ih * W + iw];
                        }
                    }
                    po[oi] = s * inv;
                }
        }

    if (track) {
        Tensor x_c = x, out_c = out;
        Tape::record([x_c, out_c, kernel, stride, padding, inv]() mutable {
            const int N = x_c.dim(0), C = x_c.dim(1), H = x_c.dim(2), W = x_c.dim(3);
            const int OH = out_c.dim(2), OW = out_c.dim(3);
            const double* g = out_c.grad_data();
            double* dx = x_c.grad_data();
            std::size_t oi = 0;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    double* xc = dx + (static_cast<std::size_t>(n) * C + c) * H * W;
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow, ++oi) {
                            const double gv = g[oi] * inv;
                            for (int ki = 0; ki < kernel; ++ki) {
                                const int ih = oh * stride + ki - padding;
                                if (ih < 0 || ih >= H) continue;
                                for (int kj = 0; kj < kernel; ++kj) {
                                    const int iw = ow * stride + kj - padding;
                                    if (iw < 0 || iw >= W) continue;
                                    xc[ih * W + iw] += gv;
                                }
                            }
                        }
                }
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    require_4d(x, "global_avg_pool input");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const double inv = 1.0 / HW;
    const bool track = tracking(x);
    Tensor out = make_output({N, C, 1, 1}, track);
    const double* px = x.data();
    double* po = out.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = px + (static_cast<std::size_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += src[i];
            po[n * C + c] = s * inv;
        }
    if (track) {
        Tensor x_c = x, out_c = out;
        Tape::record([x_c, out_c, inv]() mutable {
            const int N = x_c.dim(0), C = x_c.dim(1), HW = x_c.dim(2) * x_c.dim(3);
            const double* g = out_c.grad_data();
            double* dx = x_c.grad_data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double gv = g[n * C + c] * inv;
                    double* dst = dx + (static_cast<std::size_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) dst[i] += gv;
                }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.ndim() != 2 || weight.ndim() != 2 || bias.ndim() != 1) {
        throw DimensionError("linear expects x [N,d], weight [d',d], bias [d']");
    }
    const int N = x.dim(0), D = x.dim(1);
    const int Dout = weight.dim(0);
    if (weight.dim(1) != D || bias.dim(0) != Dout) {
        throw DimensionError("linear shape mismatch: x " + shape_str(x.shape()) +
                             ", weight " + shape_str(weight.shape()) + ", bias " +
                             shape_str(bias.shape()));
    }
    const bool track = tracking(x) || tracking(weight) || tracking(bias);
    Tensor out = make_output({N, Dout}, track);
    double* po = out.data();
    const double* pb = bias.data();
    for (int n = 0; n < N; ++n) {
        std::memcpy(po + static_cast<std::size_t>(n) * Dout, pb, sizeof(double) * Dout);
    }
    gemm_nt(x.data(), weight.data(), po, N, D, Dout);

    if (track) {
        Tensor x_c = x, w_c = weight, b_c = bias, out_c = out;
        Tape::record([x_c, w_c, b_c, out_c]() mutable {
            const int N = x_c.dim(0), D = x_c.dim(1), Dout = w_c.dim(0);
            const double* g = out_c.grad_data();
            if (x_c.requires_grad()) {
                gemm_nn(g, w_c.data(), x_c.grad_data(), N, Dout, D);
            }
            if (w_c.requires_grad()) {
                gemm_tn(g, x_c.data(), w_c.grad_data(), Dout, N, D);
            }
            if (b_c.requires_grad()) {
                double* db = b_c.grad_data();
                for (int n = 0; n < N; ++n)
                    for (int d = 0; d < Dout; ++d)
                        db[d] += g[static_cast<std::size_t>(n) * Dout + d];
            }
        });
    }
    return out;
}

namespace {

// Shared normalisation core: groups of `m` contiguous-strided elements share
// one (mean, inv_std) pair. Used by batch_norm (stride over N) and
// instance_norm (contiguous H*W blocks).
struct NormStats {
    std::vector<double> mean;
    std::vector<double> inv_std;
};

}  // namespace

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training, double eps,
                  double momentum) {
    require_4d(x, "batch_norm input");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.numel() != static_cast<std::size_t>(C) ||
        beta.numel() != static_cast<std::size_t>(C) ||
        running_mean.numel() != static_cast<std::size_t>(C) ||
        running_var.numel() != static_cast<std::size_t>(C)) {
        throw DimensionError("batch_norm parameter size mismatch for C=" +
                             std::to_string(C));
    }
    const bool track =
        tracking(x) || tracking(gamma) || tracking(beta);
    Tensor out = make_output(x.shape(), track);

    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    double* po = out.data();
    const std::size_t m = static_cast<std::size_t>(N) * HW;

    auto stats = std::make_shared<NormStats>();
    stats->mean.resize(C);
    stats->inv_std.resize(C);

    if (training) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* src = px + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) s += src[i];
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* src = px + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const double d = src[i] - mu;
                    v += d * d;
                }
            }
            v /= static_cast<double>(m);
            stats->mean[c] = mu;
            stats->inv_std[c] = 1.0 / std::sqrt(v + eps);
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * v;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            stats->mean[c] = running_mean[c];
            stats->inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }

    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double mu = stats->mean[c];
            const double is = stats->inv_std[c];
            const double gscale = pg[c] * is;
            const double shift = pb[c] - mu * gscale;
            const double* src = px + (static_cast<std::size_t>(n) * C + c) * HW;
            double* dst = po + (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) dst[i] = src[i] * gscale + shift;
        }

    if (track) {
        Tensor x_c = x, g_c = gamma, b_c = beta, out_c = out;
        Tape::record([x_c, g_c, b_c, out_c, stats, training]() mutable {
            const int N = x_c.dim(0), C = x_c.dim(1), HW = x_c.dim(2) * x_c.dim(3);
            const std::size_t m = static_cast<std::size_t>(N) * HW;
            const double* g = out_c.grad_data();
            const double* px = x_c.data();
            const double* pg = g_c.data();
            double* dx = x_c.requires_grad() ? x_c.grad_data() : nullptr;
            double* dgamma = g_c.requires_grad() ? g_c.grad_data() : nullptr;
            double* dbeta = b_c.requires_grad() ? b_c.grad_data() : nullptr;
            for (int c = 0; c < C; ++c) {
                const double mu = stats->mean[c];
                const double is = stats->inv_std[c];
                double sum_g = 0.0, sum_gx = 0.0;
                for (int n = 0; n < N; ++n) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        const double gv = g[base + i];
                        sum_g += gv;
                        sum_gx += gv * (px[base + i] - mu) * is;
                    }
                }
                if (dgamma) dgamma[c] += sum_gx;
                if (dbeta) dbeta[c] += sum_g;
                if (dx) {
                    const double gs = pg[c] * is;
                    if (training) {
                        const double mg = sum_g / static_cast<double>(m);
                        const double mgx = sum_gx / static_cast<double>(m);
                        for (int n = 0; n < N; ++n) {
                            const std::size_t base =
                                (static_cast<std::size_t>(n) * C + c) * HW;
                            for (int i = 0; i < HW; ++i) {
                                const double xh = (px[base + i] - mu) * is;
                                dx[base + i] += gs * (g[base + i] - mg - xh * mgx);
                            }
                        }
                    } else {
                        for (int n = 0; n < N; ++n) {
                            const std::size_t base =
                                (static_cast<std::size_t>(n) * C + c) * HW;
                            for (int i = 0; i < HW; ++i) dx[base + i] += gs * g[base + i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps) {
    require_4d(x, "instance_norm input");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.numel() != static_cast<std::size_t>(C) ||
        beta.numel() != static_cast<std::size_t>(C)) {
        throw DimensionError("instance_norm parameter size mismatch for C=" +
                             std::to_string(C));
    }
    const bool track = tracking(x) || tracking(gamma) || tracking(beta);
    Tensor out = make_output(x.shape(), track);

    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    double* po = out.data();

    auto stats = std::make_shared<NormStats>();
    stats->mean.resize(static_cast<std::size_t>(N) * C);
    stats->inv_std.resize(static_cast<std::size_t>(N) * C);

    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += px[base + i];
            const double mu = s / HW;
            double v = 0.0;
            for (int i = 0; i < HW; ++i) {
                const double d = px[base + i] - mu;
                v += d * d;
            }
            v /= HW;
            const double is = 1.0 / std::sqrt(v + eps);
            stats->mean[static_cast<std::size_t>(n) * C + c] = mu;
            stats->inv_std[static_cast<std::size_t>(n) * C + c] = is;
            const double gscale = pg[c] * is;
            const double shift = pb[c] - mu * gscale;
            for (int i = 0; i < HW; ++i) po[base + i] = px[base + i] * gscale + shift;
        }

    if (track) {
        Tensor x_c = x, g_c = gamma, b_c = beta, out_c = out;
        Tape::record([x_c, g_c, b_c, out_c, stats]() mutable {
            const int N = x_c.dim(0), C = x_c.dim(1), HW = x_c.dim(2) * x_c.dim(3);
            const double* g = out_c.grad_data();
            const double* px = x_c.data();
            const double* pg = g_c.data();
            double* dx = x_c.requires_grad() ? x_c.grad_data() : nullptr;
            double* dgamma = g_c.requires_grad() ? g_c.grad_data() : nullptr;
            double* dbeta = b_c.requires_grad() ? b_c.grad_data() : nullptr;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t nc = static_cast<std::size_t>(n) * C + c;
                    const std::size_t base = nc * HW;
                    const double mu = stats->mean[nc];
                    const double is = stats->inv_std[nc];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int i = 0; i < HW; ++i) {
                        const double gv = g[base + i];
                        sum_g += gv;
                        sum_gx += gv * (px[base + i] - mu) * is;
                    }
                    if (dgamma) dgamma[c] += sum_gx;
                    if (dbeta) dbeta[c] += sum_g;
                    if (dx) {
                        const double gs = pg[c] * is;
                        const double mg = sum_g / HW;
                        const double mgx = sum_gx / HW;
                        for (int i = 0; i < HW; ++i) {
                            const double xh = (px[base + i] - mu) * is;
                            dx[base + i] += gs * (g[base + i] - mg - xh * mgx);
                        }
                    }
                }
        });
    }
    return out;
}

Tensor softmax(const Tensor& x) {
    if (x.ndim() == 0) throw DimensionError("softmax on empty tensor");
    const int K = x.shape().back();
    const std::size_t rows = x.numel() / K;
    const bool track = tracking(x);
    Tensor out = make_output(x.shape(), track);
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = px + r * K;
        double* dst = po + r * K;
        double mx = src[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, src[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) {
            dst[k] = std::exp(src[k] - mx);
            s += dst[k];
        }
        const double inv = 1.0 / s;
        for (int k = 0; k < K; ++k) dst[k] *= inv;
    }
    if (track) {
        Tensor x_c = x, out_c = out;
        Tape::record([x_c, out_c]() mutable {
            const int K = out_c.shape().back();
            const std::size_t rows = out_c.numel() / K;
            const double* g = out_c.grad_data();
            const double* y = out_c.data();
            double* dx = x_c.grad_data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g + r * K;
                const double* yr = y + r * K;
                double dot = 0.0;
                for (int k = 0; k < K; ++k) dot += gr[k] * yr[k];
                for (int k = 0; k < K; ++k) dx[r * K + k] += yr[k] * (gr[k] - dot);
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    const bool track = tracking(x);
    Tensor out = make_output({1}, track);
    const double* px = x.data();
    double s = 0.0;
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) s += px[i];
    out[0] = s;
    if (track) {
        Tensor x_c = x, out_c = out;
        Tape::record([x_c, out_c]() mutable {
            const double g = out_c.grad_data()[0];
            double* dx = x_c.grad_data();
            const std::size_t n = x_c.numel();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g;
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape from " + shape_str(x.shape()) + " to " +
                             shape_str(shape) + " changes element count");
    }
    const bool track = tracking(x);
    Tensor out(std::move(shape), x.values_copy());
    if (track) {
        out.set_requires_grad(true);
        Tensor x_c = x, out_c = out;
        Tape::record([x_c, out_c]() mutable {
            const double* g = out_c.grad_data();
            double* dx = x_c.grad_data();
            const std::size_t n = x_c.numel();
            for (std::size_t i = 0; i < n; ++i) dx[i] += g[i];
        });
    }
    return out;
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& alpha) {
    if (xs.empty()) throw ContractError("weighted_sum of zero tensors");
    if (alpha.numel() != xs.size()) {
        throw ContractError("weighted_sum needs one weight per tensor, got " +
                            std::to_string(alpha.numel()) + " weights for " +
                            std::to_string(xs.size()) + " tensors");
    }
    const Shape& shape = xs.front().shape();
    bool track = tracking(alpha);
    for (const Tensor& t : xs) {
        if (t.shape() != shape) {
            throw DimensionError("weighted_sum operands differ in shape");
        }
        track = track || tracking(t);
    }
    Tensor out = make_output(shape, track);
    double* po = out.data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double a = alpha[i];
        const double* px = xs[i].data();
        if (i == 0) {
            for (std::size_t j = 0; j < n; ++j) po[j] = a * px[j];
        } else {
            for (std::size_t j = 0; j < n; ++j) po[j] += a * px[j];
        }
    }
    if (track) {
        std::vector<Tensor> xs_c = xs;
        Tensor alpha_c = alpha, out_c = out;
        Tape::record([xs_c, alpha_c, out_c]() mutable {
            const double* g = out_c.grad_data();
            const std::size_t n = out_c.numel();
            double* dalpha = alpha_c.requires_grad() ? alpha_c.grad_data() : nullptr;
            for (std::size_t i = 0; i < xs_c.size(); ++i) {
                if (xs_c[i].requires_grad()) {
                    const double a = alpha_c[i];
                    double* dx = xs_c[i].grad_data();
                    for (std::size_t j = 0; j < n; ++j) dx[j] += a * g[j];
                }
                if (dalpha) {
                    const double* px = xs_c[i].data();
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[j] * px[j];
                    dalpha[i] += s;
                }
            }
        });
    }
    return out;
}

Tensor label_smoothed_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                    double epsilon) {
    if (logits.ndim() != 2) {
        throw DimensionError("cross entropy expects logits [N,K], got " +
                             shape_str(logits.shape()));
    }
    const int N = logits.dim(0), K = logits.dim(1);
    if (K < 2) throw ConfigError("cross entropy needs at least 2 classes");
    if (static_cast<int>(labels.size()) != N) {
        throw ContractError("label count does not match batch size");
    }
    for (int y : labels) {
        if (y < 0 || y >= K) throw ContractError("label out of range [0,K)");
    }
    if (epsilon < 0.0 || epsilon >= 1.0) {
        throw ConfigError("label smoothing must lie in [0,1)");
    }

    const bool track = tracking(logits);
    Tensor out = make_output({1}, track);
    const double* px = logits.data();
    const double uniform = epsilon / K;
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* row = px + static_cast<std::size_t>(n) * K;
        double mx = row[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double se = 0.0;
        for (int k = 0; k < K; ++k) se += std::exp(row[k] - mx);
        const double lse = mx + std::log(se);
        // loss_n = sum_k q_k * (lse - x_k)
        double ln = 0.0;
        for (int k = 0; k < K; ++k) {
            const double q = uniform + (k == labels[n] ? 1.0 - epsilon : 0.0);
            ln += q * (lse - row[k]);
        }
        total += ln;
    }
    out[0] = total / N;

    if (track) {
        Tensor x_c = logits, out_c = out;
        std::vector<int> labels_c = labels;
        Tape::record([x_c, out_c, labels_c, epsilon]() mutable {
            const int N = x_c.dim(0), K = x_c.dim(1);
            const double g = out_c.grad_data()[0] / N;
            const double uniform = epsilon / K;
            const double* px = x_c.data();
            double* dx = x_c.grad_data();
            for (int n = 0; n < N; ++n) {
                const double* row = px + static_cast<std::size_t>(n) * K;
                double mx = row[0];
                for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
                double se = 0.0;
                for (int k = 0; k < K; ++k) se += std::exp(row[k] - mx);
                for (int k = 0; k < K; ++k) {
                    const double p = std::exp(row[k] - mx) / se;
                    const double q =
                        uniform + (k == labels_c[n] ? 1.0 - epsilon : 0.0);
                    dx[static_cast<std::size_t>(n) * K + k] += g * (p - q);
                }
            }
        });
    }
    return out;
}

}  // namespace osnet
