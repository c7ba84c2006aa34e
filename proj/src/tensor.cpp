#include "filmseg/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <sstream>

#include "filmseg/common.hpp"

namespace filmseg {

size_t shape_numel(const Shape& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

void check_shape(const Shape& shape) {
    check(!shape.empty(), "tensor shape must have at least one axis");
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] < 1) {
            fail("tensor axis " + std::to_string(i) + " has size " + std::to_string(shape[i]) +
                 "; all dimensions must be >= 1");
        }
    }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape(shape);
    auto p = std::make_shared<TensorData>();
    size_t n = shape_numel(shape);
    p->shape = std::move(shape);
    p->value.assign(n, 0.0f);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.value().begin(), t.value().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    check_shape(shape);
    check(shape_numel(shape) == data.size(),
          "tensor data length " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
    auto p = std::make_shared<TensorData>();
    p->shape = std::move(shape);
    p->value = std::move(data);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

float Tensor::item() const {
    check(numel() == 1, "item() requires a one-element tensor, got shape " + shape_str(shape()));
    return p_->value[0];
}

void Tensor::ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), 0.0f);
}

std::span<float> Tensor::grad() {
    ensure_grad();
    return p_->grad;
}

std::span<const float> Tensor::grad() const {
    check(!p_->grad.empty(), "tensor has no gradient buffer");
    return p_->grad;
}

void Tensor::zero_grad() {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
    auto p = std::make_shared<TensorData>(*p_);
    return Tensor(std::move(p));
}

void Tape::record(const char* op, const Tensor& output, std::function<void()> backward_fn) {
    nodes_.push_back(Node{op, output, std::move(backward_fn)});
    produced_.insert(output.id());
}

void Tape::clear() {
    nodes_.clear();
    produced_.clear();
}

void backward(Tape& tape, const Tensor& loss) {
    check(loss.defined() && loss.numel() == 1,
          "backward: loss must be a one-element tensor, got shape " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    check(tape.produced(loss), "backward: loss tensor was not produced by this tape");
    Tensor seed = loss;
    seed.ensure_grad();
    seed.grad()[0] = 1.0f;
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
        if (it->output.has_grad()) it->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// GEMM backend
// ---------------------------------------------------------------------------

namespace {

using ConstMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

constexpr int64_t kGemmColBlock = 8192;

// C[m x n] (+)= op(A) * op(B), all buffers row-major. The column-block
// decomposition is fixed, so results are identical for any worker count.
void gemm(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n, bool trans_a,
          bool trans_b, bool accumulate) {
    ConstMap A(a, trans_a ? k : m, trans_a ? m : k);
    ConstMap B(b, trans_b ? n : k, trans_b ? k : n);
    MutMap C(c, m, n);
    int64_t blocks = (n + kGemmColBlock - 1) / kGemmColBlock;
    parallel_for(blocks, [&](int64_t blk) {
        int64_t c0 = blk * kGemmColBlock;
        int64_t nc = std::min(kGemmColBlock, n - c0);
        auto cb = C.middleCols(c0, nc);
        if (!trans_a && !trans_b) {
            if (accumulate)
                cb.noalias() += A * B.middleCols(c0, nc);
            else
                cb.noalias() = A * B.middleCols(c0, nc);
        } else if (trans_a && !trans_b) {
            if (accumulate)
                cb.noalias() += A.transpose() * B.middleCols(c0, nc);
            else
                cb.noalias() = A.transpose() * B.middleCols(c0, nc);
        } else if (!trans_a && trans_b) {
            if (accumulate)
                cb.noalias() += A * B.middleRows(c0, nc).transpose();
            else
                cb.noalias() = A * B.middleRows(c0, nc).transpose();
        } else {
            if (accumulate)
                cb.noalias() += A.transpose() * B.middleRows(c0, nc).transpose();
            else
                cb.noalias() = A.transpose() * B.middleRows(c0, nc).transpose();
        }
    });
}

struct ConvDims {
    int n, cin, d, h, w;
    int cout, kd, kh, kw;
    std::array<int, 3> stride, padding;
    int od, oh, ow;
    int64_t in_vol() const { return int64_t(d) * h * w; }
    int64_t out_vol() const { return int64_t(od) * oh * ow; }
    int64_t kernel_taps() const { return int64_t(kd) * kh * kw; }
};

int conv_out_size(int in, int k, int s, int p, const char* axis, const char* op) {
    int num = in + 2 * p - k;
    if (num < 0 || num % s != 0) {
        fail(std::string(op) + ": output " + axis + " size (" + std::to_string(in) + " + 2*" +
             std::to_string(p) + " - " + std::to_string(k) + ")/" + std::to_string(s) +
             " + 1 is not a positive integer");
    }
    return num / s + 1;
}

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias,
                   const Conv3dSpec& spec) {
    check(input.ndim() == 5, "conv3d: input must be [N,Cin,D,H,W], got " + shape_str(input.shape()));
    check(weight.ndim() == 5,
          "conv3d: weight must be [Cout,Cin,kD,kH,kW], got " + shape_str(weight.shape()));
    ConvDims cd{};
    cd.n = input.dim(0);
    cd.cin = input.dim(1);
    cd.d = input.dim(2);
    cd.h = input.dim(3);
    cd.w = input.dim(4);
    cd.cout = weight.dim(0);
    cd.kd = weight.dim(2);
    cd.kh = weight.dim(3);
    cd.kw = weight.dim(4);
    if (weight.dim(1) != cd.cin) {
        fail("conv3d: channel axis mismatch: input Cin=" + std::to_string(cd.cin) +
             " but weight Cin=" + std::to_string(weight.dim(1)));
    }
    check(bias.ndim() == 1 && bias.dim(0) == cd.cout,
          "conv3d: bias must be [Cout=" + std::to_string(cd.cout) + "], got " +
              shape_str(bias.shape()));
    for (int a = 0; a < 3; ++a) {
        check(spec.stride[size_t(a)] >= 1, "conv3d: stride components must be >= 1");
        check(spec.padding[size_t(a)] >= 0, "conv3d: padding components must be >= 0");
    }
    cd.stride = spec.stride;
    cd.padding = spec.padding;
    cd.od = conv_out_size(cd.d, cd.kd, spec.stride[0], spec.padding[0], "depth", "conv3d");
    cd.oh = conv_out_size(cd.h, cd.kh, spec.stride[1], spec.padding[1], "height", "conv3d");
    cd.ow = conv_out_size(cd.w, cd.kw, spec.stride[2], spec.padding[2], "width", "conv3d");
    return cd;
}

// cols is [Cin*kD*kH*kW x od*oh*ow], row-major. Out-of-range taps read 0.
void im2col(const float* in, const ConvDims& cd, float* cols) {
    const auto [sd, sh, sw] = cd.stride;
    const auto [pd, ph, pw] = cd.padding;
    const int64_t hw = int64_t(cd.h) * cd.w;
    const int64_t out_plane = int64_t(cd.oh) * cd.ow;
    int64_t row = 0;
    for (int ci = 0; ci < cd.cin; ++ci) {
        const float* in_c = in + int64_t(ci) * cd.in_vol();
        for (int kz = 0; kz < cd.kd; ++kz)
            for (int ky = 0; ky < cd.kh; ++ky)
                for (int kx = 0; kx < cd.kw; ++kx, ++row) {
                    float* dst = cols + row * cd.out_vol();
                    for (int od = 0; od < cd.od; ++od) {
                        int iz = od * sd - pd + kz;
                        if (iz < 0 || iz >= cd.d) {
                            std::memset(dst + int64_t(od) * out_plane, 0,
                                        sizeof(float) * size_t(out_plane));
                            continue;
                        }
                        for (int oh = 0; oh < cd.oh; ++oh) {
                            int iy = oh * sh - ph + ky;
                            float* drow = dst + int64_t(od) * out_plane + int64_t(oh) * cd.ow;
                            if (iy < 0 || iy >= cd.h) {
                                std::memset(drow, 0, sizeof(float) * size_t(cd.ow));
                                continue;
                            }
                            const float* src = in_c + int64_t(iz) * hw + int64_t(iy) * cd.w;
                            for (int ow = 0; ow < cd.ow; ++ow) {
                                int ix = ow * sw - pw + kx;
                                drow[ow] = (ix >= 0 && ix < cd.w) ? src[ix] : 0.0f;
                            }
                        }
                    }
                }
    }
}

// Scatter-add of a column buffer back onto the input grid (adjoint of im2col).
void col2im_add(const float* cols, const ConvDims& cd, float* in_grad) {
    const auto [sd, sh, sw] = cd.stride;
    const auto [pd, ph, pw] = cd.padding;
    const int64_t hw = int64_t(cd.h) * cd.w;
    const int64_t out_plane = int64_t(cd.oh) * cd.ow;
    int64_t row = 0;
    for (int ci = 0; ci < cd.cin; ++ci) {
        float* g_c = in_grad + int64_t(ci) * cd.in_vol();
        for (int kz = 0; kz < cd.kd; ++kz)
            for (int ky = 0; ky < cd.kh; ++ky)
                for (int kx = 0; kx < cd.kw; ++kx, ++row) {
                    const float* src = cols + row * cd.out_vol();
                    for (int od = 0; od < cd.od; ++od) {
                        int iz = od * sd - pd + kz;
                        if (iz < 0 || iz >= cd.d) continue;
                        for (int oh = 0; oh < cd.oh; ++oh) {
                            int iy = oh * sh - ph + ky;
                            if (iy < 0 || iy >= cd.h) continue;
                            const float* srow = src + int64_t(od) * out_plane + int64_t(oh) * cd.ow;
                            float* grow = g_c + int64_t(iz) * hw + int64_t(iy) * cd.w;
                            for (int ow = 0; ow < cd.ow; ++ow) {
                                int ix = ow * sw - pw + kx;
                                if (ix >= 0 && ix < cd.w) grow[ix] += srow[ow];
                            }
                        }
                    }
                }
    }
}

}  // namespace

Tensor conv3d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv3dSpec& spec) {
    ConvDims cd = conv_dims(input, weight, bias, spec);
    Tensor out = Tensor::zeros({cd.n, cd.cout, cd.od, cd.oh, cd.ow});

    const int64_t kdim = int64_t(cd.cin) * cd.kernel_taps();
    const int64_t m = cd.out_vol();
    std::vector<float> cols(size_t(kdim * m));
    const float* in_p = input.value().data();
    const float* w_p = weight.value().data();
    float* out_p = out.value().data();
    for (int n = 0; n < cd.n; ++n) {
        im2col(in_p + int64_t(n) * cd.cin * cd.in_vol(), cd, cols.data());
        float* on = out_p + int64_t(n) * cd.cout * m;
        gemm(w_p, cols.data(), on, cd.cout, kdim, m, false, false, false);
        for (int co = 0; co < cd.cout; ++co) {
            float b = bias.value()[size_t(co)];
            float* row = on + int64_t(co) * m;
            for (int64_t i = 0; i < m; ++i) row[i] += b;
        }
    }

    bool needs = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
    if (tape && needs) {
        Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
        out.set_requires_grad(true);
        tape->record("conv3d", out, [in_t, w_t, b_t, out_t, cd]() mutable {
            const int64_t kdim = int64_t(cd.cin) * cd.kernel_taps();
            const int64_t m = cd.out_vol();
            std::span<const float> go = out_t.grad();
            std::vector<float> cols(size_t(kdim * m));
            for (int n = 0; n < cd.n; ++n) {
                const float* gn = go.data() + int64_t(n) * cd.cout * m;
                if (b_t.requires_grad()) {
                    std::span<float> gb = b_t.grad();
                    for (int co = 0; co < cd.cout; ++co) {
                        double s = 0.0;
                        const float* row = gn + int64_t(co) * m;
                        for (int64_t i = 0; i < m; ++i) s += row[i];
                        gb[size_t(co)] += float(s);
                    }
                }
                if (w_t.requires_grad()) {
                    im2col(in_t.value().data() + int64_t(n) * cd.cin * cd.in_vol(), cd,
                           cols.data());
                    gemm(gn, cols.data(), w_t.grad().data(), cd.cout, m, kdim, false, true, true);
                }
                if (in_t.requires_grad()) {
                    gemm(w_t.value().data(), gn, cols.data(), kdim, cd.cout, m, true, false,
                         false);
                    col2im_add(cols.data(), cd,
                               in_t.grad().data() + int64_t(n) * cd.cin * cd.in_vol());
                }
            }
        });
    }
    return out;
}

namespace {

struct TConvDims {
    int n, cin, d, h, w;
    int cout, kd, kh, kw;
    std::array<int, 3> stride;
    int od, oh, ow;
    int64_t in_vol() const { return int64_t(d) * h * w; }
    int64_t out_vol() const { return int64_t(od) * oh * ow; }
    int64_t kernel_taps() const { return int64_t(kd) * kh * kw; }
};

TConvDims tconv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     const std::array<int, 3>& stride) {
    check(input.ndim() == 5,
          "transposed_conv3d: input must be [N,Cin,D,H,W], got " + shape_str(input.shape()));
    check(weight.ndim() == 5,
          "transposed_conv3d: weight must be [Cin,Cout,kD,kH,kW], got " +
              shape_str(weight.shape()));
    TConvDims td{};
    td.n = input.dim(0);
    td.cin = input.dim(1);
    td.d = input.dim(2);
    td.h = input.dim(3);
    td.w = input.dim(4);
    if (weight.dim(0) != td.cin) {
        fail("transposed_conv3d: channel axis mismatch: input Cin=" + std::to_string(td.cin) +
             " but weight Cin=" + std::to_string(weight.dim(0)));
    }
    td.cout = weight.dim(1);
    td.kd = weight.dim(2);
    td.kh = weight.dim(3);
    td.kw = weight.dim(4);
    check(bias.ndim() == 1 && bias.dim(0) == td.cout,
          "transposed_conv3d: bias must be [Cout=" + std::to_string(td.cout) + "], got " +
              shape_str(bias.shape()));
    for (int a = 0; a < 3; ++a)
        check(stride[size_t(a)] >= 1, "transposed_conv3d: stride components must be >= 1");
    td.stride = stride;
    td.od = (td.d - 1) * stride[0] + td.kd;
    td.oh = (td.h - 1) * stride[1] + td.kh;
    td.ow = (td.w - 1) * stride[2] + td.kw;
    return td;
}

// Gathers output-grid values at the scatter targets of each input voxel:
// cols[(co,kz,ky,kx)][m] = out[co, iz*sd+kz, iy*sh+ky, ix*sw+kx]. Always in
// bounds by construction of the output size.
void gather_tconv(const float* out, const TConvDims& td, float* cols) {
    const auto [sd, sh, sw] = td.stride;
    const int64_t out_hw = int64_t(td.oh) * td.ow;
    const int64_t m = td.in_vol();
    int64_t row = 0;
    for (int co = 0; co < td.cout; ++co) {
        const float* out_c = out + int64_t(co) * td.out_vol();
        for (int kz = 0; kz < td.kd; ++kz)
            for (int ky = 0; ky < td.kh; ++ky)
                for (int kx = 0; kx < td.kw; ++kx, ++row) {
                    float* dst = cols + row * m;
                    for (int iz = 0; iz < td.d; ++iz)
                        for (int iy = 0; iy < td.h; ++iy) {
                            const float* src =
                                out_c + int64_t(iz * sd + kz) * out_hw + int64_t(iy * sh + ky) * td.ow +
                                kx;
                            float* drow = dst + (int64_t(iz) * td.h + iy) * td.w;
                            for (int ix = 0; ix < td.w; ++ix) drow[ix] = src[int64_t(ix) * sw];
                        }
                }
    }
}

void scatter_tconv_add(const float* cols, const TConvDims& td, float* out) {
    const auto [sd, sh, sw] = td.stride;
    const int64_t out_hw = int64_t(td.oh) * td.ow;
    const int64_t m = td.in_vol();
    int64_t row = 0;
    for (int co = 0; co < td.cout; ++co) {
        float* out_c = out + int64_t(co) * td.out_vol();
        for (int kz = 0; kz < td.kd; ++kz)
            for (int ky = 0; ky < td.kh; ++ky)
                for (int kx = 0; kx < td.kw; ++kx, ++row) {
                    const float* src = cols + row * m;
                    for (int iz = 0; iz < td.d; ++iz)
                        for (int iy = 0; iy < td.h; ++iy) {
                            float* dst = out_c + int64_t(iz * sd + kz) * out_hw +
                                         int64_t(iy * sh + ky) * td.ow + kx;
                            const float* srow = src + (int64_t(iz) * td.h + iy) * td.w;
                            for (int ix = 0; ix < td.w; ++ix) dst[int64_t(ix) * sw] += srow[ix];
                        }
                }
    }
}

}  // namespace

Tensor transposed_conv3d(Tape* tape, const Tensor& input, const Tensor& weight,
                         const Tensor& bias, const std::array<int, 3>& stride) {
    TConvDims td = tconv_dims(input, weight, bias, stride);
    Tensor out = Tensor::zeros({td.n, td.cout, td.od, td.oh, td.ow});

    const int64_t kdim = int64_t(td.cout) * td.kernel_taps();
    const int64_t m = td.in_vol();
    std::vector<float> cols(size_t(kdim * m));
    for (int n = 0; n < td.n; ++n) {
        const float* xn = input.value().data() + int64_t(n) * td.cin * m;
        float* on = out.value().data() + int64_t(n) * td.cout * td.out_vol();
        for (int co = 0; co < td.cout; ++co) {
            float b = bias.value()[size_t(co)];
            float* row = on + int64_t(co) * td.out_vol();
            for (int64_t i = 0; i < td.out_vol(); ++i) row[i] = b;
        }
        // cols = W^T(as [Cin x Cout*k^3])^T ... : [Cout*k^3 x M] = W^T * X
        gemm(weight.value().data(), xn, cols.data(), kdim, td.cin, m, true, false, false);
        scatter_tconv_add(cols.data(), td, on);
    }

    bool needs = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
    if (tape && needs) {
        Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
        out.set_requires_grad(true);
        tape->record("transposed_conv3d", out, [in_t, w_t, b_t, out_t, td]() mutable {
            const int64_t kdim = int64_t(td.cout) * td.kernel_taps();
            const int64_t m = td.in_vol();
            std::span<const float> go = out_t.grad();
            std::vector<float> cols(size_t(kdim * m));
            for (int n = 0; n < td.n; ++n) {
                const float* gn = go.data() + int64_t(n) * td.cout * td.out_vol();
                if (b_t.requires_grad()) {
                    std::span<float> gb = b_t.grad();
                    for (int co = 0; co < td.cout; ++co) {
                        double s = 0.0;
                        const float* row = gn + int64_t(co) * td.out_vol();
                        for (int64_t i = 0; i < td.out_vol(); ++i) s += row[i];
                        gb[size_t(co)] += float(s);
                    }
                }
                if (!in_t.requires_grad() && !w_t.requires_grad()) continue;
                gather_tconv(gn, td, cols.data());
                if (in_t.requires_grad()) {
                    gemm(w_t.value().data(), cols.data(),
                         in_t.grad().data() + int64_t(n) * td.cin * m, td.cin, kdim, m, false,
                         false, true);
                }
                if (w_t.requires_grad()) {
                    const float* xn = in_t.value().data() + int64_t(n) * td.cin * m;
                    gemm(xn, cols.data(), w_t.grad().data(), td.cin, m, kdim, false, true, true);
                }
            }
        });
    }
    return out;
}

Tensor instance_norm(Tape* tape, const Tensor& input, const Tensor& gain, const Tensor& shift,
                     float epsilon) {
    check(input.ndim() == 5,
          "instance_norm: input must be [N,C,D,H,W], got " + shape_str(input.shape()));
    const int n = input.dim(0), c = input.dim(1);
    const int64_t vol = int64_t(input.dim(2)) * input.dim(3) * input.dim(4);
    check(vol >= 2, "instance_norm: spatial volume must be >= 2 voxels");
    check(gain.ndim() == 1 && gain.dim(0) == c && shift.ndim() == 1 && shift.dim(0) == c,
          "instance_norm: gain/shift must be [C=" + std::to_string(c) + "]");

    Tensor out = Tensor::zeros(input.shape());
    std::vector<float> means(size_t(n) * c), invstds(size_t(n) * c);
    const float* in_p = input.value().data();
    float* out_p = out.value().data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const float* x = in_p + (int64_t(i) * c + ch) * vol;
            double sum = 0.0, sumsq = 0.0;
            for (int64_t v = 0; v < vol; ++v) {
                sum += x[v];
                sumsq += double(x[v]) * x[v];
            }
            double mean = sum / double(vol);
            double var = std::max(0.0, sumsq / double(vol) - mean * mean);
            float mu = float(mean);
            float inv = float(1.0 / std::sqrt(var + double(epsilon)));
            means[size_t(i) * c + ch] = mu;
            invstds[size_t(i) * c + ch] = inv;
            float g = gain.value()[size_t(ch)], s = shift.value()[size_t(ch)];
            float* y = out_p + (int64_t(i) * c + ch) * vol;
            for (int64_t v = 0; v < vol; ++v) y[v] = g * ((x[v] - mu) * inv) + s;
        }
    }

    bool needs = input.requires_grad() || gain.requires_grad() || shift.requires_grad();
    if (tape && needs) {
        Tensor in_t = input, g_t = gain, s_t = shift, out_t = out;
        out.set_requires_grad(true);
        tape->record("instance_norm", out,
                     [in_t, g_t, s_t, out_t, means, invstds, n, c, vol]() mutable {
                         std::span<const float> go = out_t.grad();
                         for (int i = 0; i < n; ++i) {
                             for (int ch = 0; ch < c; ++ch) {
                                 const float* x = in_t.value().data() + (int64_t(i) * c + ch) * vol;
                                 const float* dy = go.data() + (int64_t(i) * c + ch) * vol;
                                 float mu = means[size_t(i) * c + ch];
                                 float inv = invstds[size_t(i) * c + ch];
                                 float g = g_t.value()[size_t(ch)];
                                 if (g_t.requires_grad() || s_t.requires_grad()) {
                                     double dg = 0.0, ds = 0.0;
                                     for (int64_t v = 0; v < vol; ++v) {
                                         float xh = (x[v] - mu) * inv;
                                         dg += double(dy[v]) * xh;
                                         ds += dy[v];
                                     }
                                     if (g_t.requires_grad()) g_t.grad()[size_t(ch)] += float(dg);
                                     if (s_t.requires_grad()) s_t.grad()[size_t(ch)] += float(ds);
                                 }
                                 if (in_t.requires_grad()) {
                                     double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                                     for (int64_t v = 0; v < vol; ++v) {
                                         float xh = (x[v] - mu) * inv;
                                         double dxh = double(dy[v]) * g;
                                         sum_dxh += dxh;
                                         sum_dxh_xh += dxh * xh;
                                     }
                                     double mean_dxh = sum_dxh / double(vol);
                                     double mean_dxh_xh = sum_dxh_xh / double(vol);
                                     float* gx = in_t.grad().data() + (int64_t(i) * c + ch) * vol;
                                     for (int64_t v = 0; v < vol; ++v) {
                                         float xh = (x[v] - mu) * inv;
                                         double dxh = double(dy[v]) * g;
                                         gx[v] += float(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
                                     }
                                 }
                             }
                         }
                     });
    }
    return out;
}

Tensor leaky_relu(Tape* tape, const Tensor& input, float slope) {
    Tensor out = Tensor::zeros(input.shape());
    const float* x = input.value().data();
    float* y = out.value().data();
    const size_t n = input.numel();
    for (size_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0f ? x[i] : slope * x[i];

    if (tape && input.requires_grad()) {
        Tensor in_t = input, out_t = out;
        out.set_requires_grad(true);
        tape->record("leaky_relu", out, [in_t, out_t, slope]() mutable {
            std::span<const float> go = out_t.grad();
            std::span<float> gx = in_t.grad();
            std::span<const float> x = in_t.value();
            for (size_t i = 0; i < x.size(); ++i)
                gx[i] += x[i] >= 0.0f ? go[i] : slope * go[i];
        });
    }
    return out;
}

Tensor softmax_channel(Tape* tape, const Tensor& input) {
    check(input.ndim() >= 2, "softmax_channel: input must have a channel axis (dim 1)");
    const int n = input.dim(0), c = input.dim(1);
    check(c >= 2, "softmax_channel: needs C >= 2, got C=" + std::to_string(c));
    int64_t vol = 1;
    for (int a = 2; a < input.ndim(); ++a) vol *= input.dim(a);

    Tensor out = Tensor::zeros(input.shape());
    const float* x = input.value().data();
    float* y = out.value().data();
    for (int i = 0; i < n; ++i) {
        const float* xi = x + int64_t(i) * c * vol;
        float* yi = y + int64_t(i) * c * vol;
        for (int64_t v = 0; v < vol; ++v) {
            float m = xi[v];
            for (int ch = 1; ch < c; ++ch) m = std::max(m, xi[int64_t(ch) * vol + v]);
            double denom = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                float e = std::exp(xi[int64_t(ch) * vol + v] - m);
                yi[int64_t(ch) * vol + v] = e;
                denom += e;
            }
            float inv = float(1.0 / denom);
            for (int ch = 0; ch < c; ++ch) yi[int64_t(ch) * vol + v] *= inv;
        }
    }

    if (tape && input.requires_grad()) {
        Tensor in_t = input, out_t = out;
        out.set_requires_grad(true);
        tape->record("softmax_channel", out, [in_t, out_t, n, c, vol]() mutable {
            std::span<const float> go = out_t.grad();
            std::span<const float> y = out_t.value();
            std::span<float> gx = in_t.grad();
            for (int i = 0; i < n; ++i) {
                int64_t base = int64_t(i) * c * vol;
                for (int64_t v = 0; v < vol; ++v) {
                    double dot = 0.0;
                    for (int ch = 0; ch < c; ++ch) {
                        int64_t idx = base + int64_t(ch) * vol + v;
                        dot += double(y[idx]) * go[idx];
                    }
                    for (int ch = 0; ch < c; ++ch) {
                        int64_t idx = base + int64_t(ch) * vol + v;
                        gx[idx] += float(double(y[idx]) * (double(go[idx]) - dot));
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b) {
    check(a.ndim() == b.ndim() && a.ndim() >= 2, "concat_channels: rank mismatch");
    for (int ax = 0; ax < a.ndim(); ++ax) {
        if (ax == 1) continue;
        if (a.dim(ax) != b.dim(ax)) {
            fail("concat_channels: axis " + std::to_string(ax) + " mismatch: " +
                 std::to_string(a.dim(ax)) + " vs " + std::to_string(b.dim(ax)));
        }
    }
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    int64_t vol = 1;
    for (int ax = 2; ax < a.ndim(); ++ax) vol *= a.dim(ax);

    Shape out_shape = a.shape();
    out_shape[1] = ca + cb;
    Tensor out = Tensor::zeros(out_shape);
    float* y = out.value().data();
    for (int i = 0; i < n; ++i) {
        std::memcpy(y + int64_t(i) * (ca + cb) * vol, a.value().data() + int64_t(i) * ca * vol,
                    sizeof(float) * size_t(ca * vol));
        std::memcpy(y + (int64_t(i) * (ca + cb) + ca) * vol,
                    b.value().data() + int64_t(i) * cb * vol, sizeof(float) * size_t(cb * vol));
    }

    if (tape && (a.requires_grad() || b.requires_grad())) {
        Tensor a_t = a, b_t = b, out_t = out;
        out.set_requires_grad(true);
        tape->record("concat_channels", out, [a_t, b_t, out_t, n, ca, cb, vol]() mutable {
            std::span<const float> go = out_t.grad();
            for (int i = 0; i < n; ++i) {
                if (a_t.requires_grad()) {
                    std::span<float> ga = a_t.grad();
                    const float* src = go.data() + int64_t(i) * (ca + cb) * vol;
                    float* dst = ga.data() + int64_t(i) * ca * vol;
                    for (int64_t v = 0; v < int64_t(ca) * vol; ++v) dst[v] += src[v];
                }
                if (b_t.requires_grad()) {
                    std::span<float> gb = b_t.grad();
                    const float* src = go.data() + (int64_t(i) * (ca + cb) + ca) * vol;
                    float* dst = gb.data() + int64_t(i) * cb * vol;
                    for (int64_t v = 0; v < int64_t(cb) * vol; ++v) dst[v] += src[v];
                }
            }
        });
    }
    return out;
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    check(x.ndim() == 1, "linear: x must be rank-1, got " + shape_str(x.shape()));
    check(weight.ndim() == 2, "linear: weight must be [out,in], got " + shape_str(weight.shape()));
    const int in = x.dim(0), out_dim = weight.dim(0);
    check(weight.dim(1) == in, "linear: weight in-dim " + std::to_string(weight.dim(1)) +
                                   " does not match x length " + std::to_string(in));
    check(bias.ndim() == 1 && bias.dim(0) == out_dim, "linear: bias must be [out]");

    Tensor out = Tensor::zeros({out_dim});
    for (int o = 0; o < out_dim; ++o) {
        double s = bias.value()[size_t(o)];
        const float* wrow = weight.value().data() + int64_t(o) * in;
        for (int i = 0; i < in; ++i) s += double(wrow[i]) * x.value()[size_t(i)];
        out.value()[size_t(o)] = float(s);
    }

    bool needs = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    if (tape && needs) {
        Tensor x_t = x, w_t = weight, b_t = bias, out_t = out;
        out.set_requires_grad(true);
        tape->record("linear", out, [x_t, w_t, b_t, out_t, in, out_dim]() mutable {
            std::span<const float> go = out_t.grad();
            for (int o = 0; o < out_dim; ++o) {
                float g = go[size_t(o)];
                if (b_t.requires_grad()) b_t.grad()[size_t(o)] += g;
                if (w_t.requires_grad()) {
                    float* wg = w_t.grad().data() + int64_t(o) * in;
                    for (int i = 0; i < in; ++i) wg[i] += g * x_t.value()[size_t(i)];
                }
                if (x_t.requires_grad()) {
                    const float* wrow = w_t.value().data() + int64_t(o) * in;
                    for (int i = 0; i < in; ++i) x_t.grad()[size_t(i)] += g * wrow[i];
                }
            }
        });
    }
    return out;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
    if (tape && (a.requires_grad() || b.requires_grad())) {
        Tensor a_t = a, b_t = b, out_t = out;
        out.set_requires_grad(true);
        tape->record("add", out, [a_t, b_t, out_t]() mutable {
            std::span<const float> go = out_t.grad();
            if (a_t.requires_grad())
                for (size_t i = 0; i < go.size(); ++i) a_t.grad()[i] += go[i];
            if (b_t.requires_grad())
                for (size_t i = 0; i < go.size(); ++i) b_t.grad()[i] += go[i];
        });
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * b.value()[i];
    if (tape && (a.requires_grad() || b.requires_grad())) {
        Tensor a_t = a, b_t = b, out_t = out;
        out.set_requires_grad(true);
        tape->record("mul", out, [a_t, b_t, out_t]() mutable {
            std::span<const float> go = out_t.grad();
            if (a_t.requires_grad())
                for (size_t i = 0; i < go.size(); ++i) a_t.grad()[i] += go[i] * b_t.value()[i];
            if (b_t.requires_grad())
                for (size_t i = 0; i < go.size(); ++i) b_t.grad()[i] += go[i] * a_t.value()[i];
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& x, float s) {
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out.value()[i] = s * x.value()[i];
    if (tape && x.requires_grad()) {
        Tensor x_t = x, out_t = out;
        out.set_requires_grad(true);
        tape->record("scale", out, [x_t, out_t, s]() mutable {
            std::span<const float> go = out_t.grad();
            for (size_t i = 0; i < go.size(); ++i) x_t.grad()[i] += s * go[i];
        });
    }
    return out;
}

Tensor reduce_sum(Tape* tape, const Tensor& x) {
    double s = 0.0;
    for (float v : x.value()) s += v;
    Tensor out = Tensor::scalar(float(s));
    if (tape && x.requires_grad()) {
        Tensor x_t = x, out_t = out;
        out.set_requires_grad(true);
        tape->record("reduce_sum", out, [x_t, out_t]() mutable {
            float g = out_t.grad()[0];
            for (size_t i = 0; i < x_t.numel(); ++i) x_t.grad()[i] += g;
        });
    }
    return out;
}

double finite_difference_at(const std::function<double()>& f, Tensor& param, size_t index,
                            float h) {
    check(h > 0.0f, "finite_difference: h must be > 0");
    check(index < param.numel(), "finite_difference: parameter index out of range");
    float saved = param.value()[index];
    float hp = saved + h;
    float hm = saved - h;
    param.value()[index] = hp;
    double f_plus = f();
    param.value()[index] = hm;
    double f_minus = f();
    param.value()[index] = saved;
    // divide by the realized f32 step, not the nominal one
    return (f_plus - f_minus) / (double(hp) - double(hm));
}

std::vector<std::vector<float>> finite_difference_grad(const std::function<double()>& f,
                                                       std::span<Tensor> params, float h) {
    std::vector<std::vector<float>> grads;
    grads.reserve(params.size());
    for (Tensor& p : params) {
        std::vector<float> g(p.numel());
        for (size_t i = 0; i < p.numel(); ++i)
            g[i] = float(finite_difference_at(f, p, i, h));
        grads.push_back(std::move(g));
    }
    return grads;
}

}  // namespace filmseg
