#pragma once

// Differentiable ops over TensorT. Forward work heavy enough to matter runs
// through the kernels in kernels.hpp; everything else is fixed-order serial
// loops, so a given graph evaluates bit-identically on any thread count.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ppm/common.hpp"
#include "ppm/kernels.hpp"
#include "ppm/tensor.hpp"

namespace ppm {

template <typename T>
void axpy_into(std::vector<T>& dst, const std::vector<T>& src) {
    for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

namespace detail {

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline long long leading_groups(const Shape& s) {
    long long g = 1;
    for (size_t i = 0; i + 2 < s.size(); ++i) g *= s[i];
    return g;
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    TensorT<T> y = make_op_node<T>(a.shape(), {a, b}, [](NodeT<T>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            axpy_into(p.grad, self.grad);
        }
    });
    for (size_t i = 0; i < y.numel(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
    return y;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    TensorT<T> y = make_op_node<T>(a.shape(), {a, b}, [](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
    for (size_t i = 0; i < y.numel(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
    return y;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    TensorT<T> y = make_op_node<T>(x.shape(), {x}, [c](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
    });
    for (size_t i = 0; i < y.numel(); ++i) y.data()[i] = c * x.data()[i];
    return y;
}

// y = x W^T + b with x [..., in], W [out, in], b [out]. Pass a default
// TensorT for no bias.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b = TensorT<T>()) {
    if (x.shape().empty() || w.shape().size() != 2)
        throw ShapeError("linear: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()));
    const int in = x.shape().back();
    const int out = w.shape()[0];
    if (w.shape()[1] != in)
        throw ShapeError("linear: x " + shape_str(x.shape()) + " vs W " + shape_str(w.shape()));
    const bool has_bias = b.defined();
    if (has_bias && (b.shape().size() != 1 || b.shape()[0] != out))
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " for out=" + std::to_string(out));
    const long long rows = static_cast<long long>(x.numel()) / in;

    Shape out_shape = x.shape();
    out_shape.back() = out;
    std::vector<TensorT<T>> inputs{x, w};
    if (has_bias) inputs.push_back(b);

    TensorT<T> y = make_op_node<T>(out_shape, std::move(inputs), [rows, in, out, has_bias](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            std::vector<T> scratch(px.data.size());
            kernels::bmm_nn(self.grad.data(), pw.data.data(), scratch.data(), 1,
                            static_cast<int>(rows), out, in);
            axpy_into(px.grad, scratch);
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            std::vector<T> scratch(pw.data.size());
            kernels::bmm_tn(self.grad.data(), px.data.data(), scratch.data(), 1, out, in,
                            static_cast<int>(rows));
            axpy_into(pw.grad, scratch);
        }
        if (has_bias) {
            auto& pb = *self.parents[2];
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (long long r = 0; r < rows; ++r)
                    for (int j = 0; j < out; ++j) pb.grad[j] += self.grad[r * out + j];
            }
        }
    });

    kernels::bmm_nt(x.data().data(), w.data().data(), y.data().data(), 1, static_cast<int>(rows),
                    out, in);
    if (has_bias) {
        for (long long r = 0; r < rows; ++r)
            for (int j = 0; j < out; ++j) y.data()[r * out + j] += b.data()[j];
    }
    return y;
}

// Batched y = a b with a [..., m, k], b [..., k, n], identical leading dims.
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sa.size() != sb.size())
        throw ShapeError("bmm: " + shape_str(sa) + " vs " + shape_str(sb));
    for (size_t i = 0; i + 2 < sa.size(); ++i)
        if (sa[i] != sb[i]) throw ShapeError("bmm: " + shape_str(sa) + " vs " + shape_str(sb));
    const int m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
    if (sb[sb.size() - 2] != k) throw ShapeError("bmm: " + shape_str(sa) + " vs " + shape_str(sb));
    const int groups = static_cast<int>(detail::leading_groups(sa));

    Shape out_shape = sa;
    out_shape.back() = n;
    TensorT<T> y = make_op_node<T>(out_shape, {a, b}, [groups, m, k, n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            std::vector<T> scratch(pa.data.size());
            kernels::bmm_nt(self.grad.data(), pb.data.data(), scratch.data(), groups, m, k, n);
            axpy_into(pa.grad, scratch);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            std::vector<T> scratch(pb.data.size());
            kernels::bmm_tn(pa.data.data(), self.grad.data(), scratch.data(), groups, k, n, m);
            axpy_into(pb.grad, scratch);
        }
    });
    kernels::bmm_nn(a.data().data(), b.data().data(), y.data().data(), groups, m, k, n);
    return y;
}

// Batched y = a b^T with a [..., m, k], b [..., n, k].
template <typename T>
TensorT<T> bmm_t(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sa.size() != sb.size())
        throw ShapeError("bmm_t: " + shape_str(sa) + " vs " + shape_str(sb));
    for (size_t i = 0; i + 2 < sa.size(); ++i)
        if (sa[i] != sb[i]) throw ShapeError("bmm_t: " + shape_str(sa) + " vs " + shape_str(sb));
    const int m = sa[sa.size() - 2], k = sa.back(), n = sb[sb.size() - 2];
    if (sb.back() != k) throw ShapeError("bmm_t: " + shape_str(sa) + " vs " + shape_str(sb));
    const int groups = static_cast<int>(detail::leading_groups(sa));

    Shape out_shape = sa;
    out_shape.back() = n;
    TensorT<T> y = make_op_node<T>(out_shape, {a, b}, [groups, m, k, n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            std::vector<T> scratch(pa.data.size());
            kernels::bmm_nn(self.grad.data(), pb.data.data(), scratch.data(), groups, m, n, k);
            axpy_into(pa.grad, scratch);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            std::vector<T> scratch(pb.data.size());
            kernels::bmm_tn(self.grad.data(), pa.data.data(), scratch.data(), groups, n, k, m);
            axpy_into(pb.grad, scratch);
        }
    });
    kernels::bmm_nt(a.data().data(), b.data().data(), y.data().data(), groups, m, n, k);
    return y;
}

template <typename T>
TensorT<T> softmax_last(const TensorT<T>& x) {
    if (x.shape().empty()) throw ShapeError("softmax_last: scalar input");
    const int width = x.shape().back();
    const long long rows = static_cast<long long>(x.numel()) / width;
    TensorT<T> y = make_op_node<T>(x.shape(), {x}, [rows, width](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        kernels::softmax_rows_backward(self.data.data(), self.grad.data(), p.grad.data(), rows, width);
    });
    kernels::softmax_rows(x.data().data(), y.data().data(), rows, width);
    return y;
}

// Sets entries above the diagonal of the trailing [L, L] to `value` so a
// following softmax ignores future positions. Filled slots get zero gradient.
template <typename T>
TensorT<T> causal_mask_fill(const TensorT<T>& x, T value = T(-1e9)) {
    const auto& s = x.shape();
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2])
        throw ShapeError("causal_mask_fill: " + shape_str(s));
    const int L = s.back();
    const long long groups = detail::leading_groups(s);
    TensorT<T> y = make_op_node<T>(s, {x}, [groups, L](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (long long g = 0; g < groups; ++g) {
            const long long base = g * L * L;
            for (int i = 0; i < L; ++i)
                for (int j = 0; j <= i; ++j) p.grad[base + i * L + j] += self.grad[base + i * L + j];
        }
    });
    for (long long g = 0; g < groups; ++g) {
        const long long base = g * L * L;
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < L; ++j)
                y.data()[base + i * L + j] = j <= i ? x.data()[base + i * L + j] : value;
    }
    return y;
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps = T(1e-5)) {
    if (x.shape().empty()) throw ShapeError("layer_norm: scalar input");
    const int width = x.shape().back();
    if (gain.shape() != Shape{width} || bias.shape() != Shape{width})
        throw ShapeError("layer_norm: affine " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " for width " + std::to_string(width));
    const long long rows = static_cast<long long>(x.numel()) / width;

    auto mean = std::make_shared<std::vector<T>>(rows);
    auto rstd = std::make_shared<std::vector<T>>(rows);
    TensorT<T> y = make_op_node<T>(x.shape(), {x, gain, bias}, [rows, width, mean, rstd](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (long long r = 0; r < rows; ++r) {
            const T* xr = px.data.data() + r * width;
            const T* gr = self.grad.data() + r * width;
            const T m = (*mean)[r], rs = (*rstd)[r];
            if (pg.requires_grad || pb.requires_grad) {
                for (int i = 0; i < width; ++i) {
                    const T xhat = (xr[i] - m) * rs;
                    if (pg.requires_grad) pg.grad[i] += gr[i] * xhat;
                    if (pb.requires_grad) pb.grad[i] += gr[i];
                }
            }
            if (px.requires_grad) {
                T a1 = 0, a2 = 0;
                for (int i = 0; i < width; ++i) {
                    const T gh = gr[i] * pg.data[i];
                    const T xhat = (xr[i] - m) * rs;
                    a1 += gh;
                    a2 += gh * xhat;
                }
                a1 /= T(width);
                a2 /= T(width);
                for (int i = 0; i < width; ++i) {
                    const T gh = gr[i] * pg.data[i];
                    const T xhat = (xr[i] - m) * rs;
                    px.grad[r * width + i] += rs * (gh - a1 - xhat * a2);
                }
            }
        }
    });
    kernels::layer_norm_rows(x.data().data(), gain.data().data(), bias.data().data(), y.data().data(),
                             mean->data(), rstd->data(), rows, width, eps);
    return y;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    const long long n = static_cast<long long>(x.numel());
    TensorT<T> y = make_op_node<T>(x.shape(), {x}, [n](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        kernels::gelu_backward(p.data.data(), self.grad.data(), p.grad.data(), n);
    });
    kernels::gelu(x.data().data(), y.data().data(), n);
    return y;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    TensorT<T> y = make_op_node<T>(x.shape(), {x}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T v = self.data[i];
            p.grad[i] += self.grad[i] * v * (T(1) - v);
        }
    });
    for (size_t i = 0; i < y.numel(); ++i) y.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
    return y;
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& x) {
    TensorT<T> y = make_op_node<T>(x.shape(), {x}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T v = self.data[i];
            p.grad[i] += self.grad[i] * (T(1) - v * v);
        }
    });
    for (size_t i = 0; i < y.numel(); ++i) y.data()[i] = std::tanh(x.data()[i]);
    return y;
}

// Token id lookup. ids are row indices into table [V, E]; output [B, L, E].
template <typename T>
TensorT<T> embedding(const std::vector<int>& ids, int batch, int len, const TensorT<T>& table) {
    if (static_cast<long long>(ids.size()) != static_cast<long long>(batch) * len)
        throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for batch " +
                         std::to_string(batch) + " x " + std::to_string(len));
    if (table.shape().size() != 2) throw ShapeError("embedding: table " + shape_str(table.shape()));
    const int vocab = table.shape()[0];
    const int width = table.shape()[1];
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw IndexError("embedding: id " + std::to_string(id) + " outside vocab " +
                             std::to_string(vocab));

    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    TensorT<T> y = make_op_node<T>({batch, len, width}, {table}, [ids_copy, width](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t r = 0; r < ids_copy->size(); ++r) {
            const int id = (*ids_copy)[r];
            for (int i = 0; i < width; ++i) p.grad[id * width + i] += self.grad[r * width + i];
        }
    });
    for (size_t r = 0; r < ids.size(); ++r)
        for (int i = 0; i < width; ++i) y.data()[r * width + i] = table.data()[ids[r] * width + i];
    return y;
}

// x [B, L, E] plus the first L rows of pos [Lmax, E], broadcast over batch.
template <typename T>
TensorT<T> add_position(const TensorT<T>& x, const TensorT<T>& pos) {
    const auto& s = x.shape();
    if (s.size() != 3 || pos.shape().size() != 2)
        throw ShapeError("add_position: " + shape_str(s) + " with " + shape_str(pos.shape()));
    const int batch = s[0], len = s[1], width = s[2];
    if (pos.shape()[1] != width || pos.shape()[0] < len)
        throw ShapeError("add_position: " + shape_str(s) + " with " + shape_str(pos.shape()));

    TensorT<T> y = make_op_node<T>(s, {x, pos}, [batch, len, width](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pp = *self.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            axpy_into(px.grad, self.grad);
        }
        if (pp.requires_grad) {
            pp.ensure_grad();
            for (int b = 0; b < batch; ++b)
                for (int l = 0; l < len; ++l)
                    for (int i = 0; i < width; ++i)
                        pp.grad[l * width + i] += self.grad[(b * len + l) * width + i];
        }
    });
    for (int b = 0; b < batch; ++b)
        for (int l = 0; l < len; ++l)
            for (int i = 0; i < width; ++i)
                y.data()[(b * len + l) * width + i] = x.data()[(b * len + l) * width + i] + pos.data()[l * width + i];
    return y;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    TensorT<T> y = make_op_node<T>(std::move(shape), {x}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        axpy_into(p.grad, self.grad);
    });
    y.data() = x.data();
    return y;
}

// [A, B, C, D] -> [A, C, B, D]; its own inverse, which the backward reuses.
template <typename T>
TensorT<T> permute_0213(const TensorT<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("permute_0213: " + shape_str(s));
    const int a = s[0], b = s[1], c = s[2], d = s[3];
    TensorT<T> y = make_op_node<T>({a, c, b, d}, {x}, [a, b, c, d](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < a; ++i)
            for (int j = 0; j < c; ++j)
                for (int k = 0; k < b; ++k)
                    for (int l = 0; l < d; ++l)
                        p.grad[((i * b + k) * c + j) * d + l] += self.grad[((i * c + j) * b + k) * d + l];
    });
    for (int i = 0; i < a; ++i)
        for (int j = 0; j < b; ++j)
            for (int k = 0; k < c; ++k)
                for (int l = 0; l < d; ++l)
                    y.data()[((i * c + k) * b + j) * d + l] = x.data()[((i * b + j) * c + k) * d + l];
    return y;
}

template <typename T>
TensorT<T> slice_last(const TensorT<T>& x, int start, int len) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeError("slice_last: scalar input");
    const int width = s.back();
    if (start < 0 || len <= 0 || start + len > width)
        throw IndexError("slice_last: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") of width " + std::to_string(width));
    const long long rows = static_cast<long long>(x.numel()) / width;
    Shape out_shape = s;
    out_shape.back() = len;
    TensorT<T> y = make_op_node<T>(out_shape, {x}, [rows, width, start, len](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (long long r = 0; r < rows; ++r)
            for (int i = 0; i < len; ++i) p.grad[r * width + start + i] += self.grad[r * len + i];
    });
    for (long long r = 0; r < rows; ++r)
        for (int i = 0; i < len; ++i) y.data()[r * len + i] = x.data()[r * width + start + i];
    return y;
}

// [B, L, F] -> [B, F] at time t.
template <typename T>
TensorT<T> select_time(const TensorT<T>& x, int t) {
    const auto& s = x.shape();
    if (s.size() != 3) throw ShapeError("select_time: " + shape_str(s));
    const int batch = s[0], len = s[1], width = s[2];
    if (t < 0 || t >= len) throw IndexError("select_time: t=" + std::to_string(t) + " of " + std::to_string(len));
    TensorT<T> y = make_op_node<T>({batch, width}, {x}, [len, width, t](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const int batch = self.shape[0];
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < width; ++i) p.grad[(b * len + t) * width + i] += self.grad[b * width + i];
    });
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < width; ++i) y.data()[b * width + i] = x.data()[(b * len + t) * width + i];
    return y;
}

// Join two tensors along the last dimension; leading dims must match.
template <typename T>
TensorT<T> concat_last(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.empty() || sa.size() != sb.size())
        throw ShapeError("concat_last: " + shape_str(sa) + " vs " + shape_str(sb));
    for (size_t i = 0; i + 1 < sa.size(); ++i)
        if (sa[i] != sb[i]) throw ShapeError("concat_last: " + shape_str(sa) + " vs " + shape_str(sb));
    const int wa = sa.back(), wb = sb.back();
    const long long rows = static_cast<long long>(a.numel()) / wa;
    Shape out_shape = sa;
    out_shape.back() = wa + wb;
    TensorT<T> y = make_op_node<T>(out_shape, {a, b}, [rows, wa, wb](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const int w = wa + wb;
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (long long r = 0; r < rows; ++r)
                for (int i = 0; i < wa; ++i) pa.grad[r * wa + i] += self.grad[r * w + i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (long long r = 0; r < rows; ++r)
                for (int i = 0; i < wb; ++i) pb.grad[r * wb + i] += self.grad[r * w + wa + i];
        }
    });
    for (long long r = 0; r < rows; ++r) {
        for (int i = 0; i < wa; ++i) y.data()[r * (wa + wb) + i] = a.data()[r * wa + i];
        for (int i = 0; i < wb; ++i) y.data()[r * (wa + wb) + wa + i] = b.data()[r * wb + i];
    }
    return y;
}

// Stack L tensors of [B, F] into [B, L, F].
template <typename T>
TensorT<T> stack_time(const std::vector<TensorT<T>>& steps) {
    if (steps.empty()) throw ShapeError("stack_time: no inputs");
    const auto& s0 = steps[0].shape();
    if (s0.size() != 2) throw ShapeError("stack_time: step " + shape_str(s0));
    for (const auto& t : steps) detail::check_same_shape(steps[0], t, "stack_time");
    const int batch = s0[0], width = s0[1];
    const int len = static_cast<int>(steps.size());
    TensorT<T> y = make_op_node<T>({batch, len, width}, steps, [batch, len, width](NodeT<T>& self) {
        for (int l = 0; l < len; ++l) {
            auto& p = *self.parents[l];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (int b = 0; b < batch; ++b)
                for (int i = 0; i < width; ++i)
                    p.grad[b * width + i] += self.grad[(b * len + l) * width + i];
        }
    });
    for (int l = 0; l < len; ++l)
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < width; ++i)
                y.data()[(b * len + l) * width + i] = steps[l].data()[b * width + i];
    return y;
}

// Inverted dropout; identity when not training or p == 0. Mask draws come
// from the caller's stream in element order.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double p, std::mt19937& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw ValueError("dropout: p=" + std::to_string(p));
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    const T keep_scale = T(1.0 / (1.0 - p));
    for (size_t i = 0; i < mask->size(); ++i)
        (*mask)[i] = uniform01(rng) < p ? T(0) : keep_scale;
    TensorT<T> y = make_op_node<T>(x.shape(), {x}, [mask](NodeT<T>& self) {
        auto& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * (*mask)[i];
    });
    for (size_t i = 0; i < y.numel(); ++i) y.data()[i] = x.data()[i] * (*mask)[i];
    return y;
}

// Mean token-level cross entropy over rows with mask != 0. logits [N, V].
template <typename T>
TensorT<T> cross_entropy_masked(const TensorT<T>& logits, const std::vector<int>& targets,
                                const std::vector<uint8_t>& mask) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy_masked: logits " + shape_str(s));
    const int n = s[0], vocab = s[1];
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
        throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets, " +
                         std::to_string(mask.size()) + " mask entries for " + std::to_string(n) + " rows");
    long long count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    if (count == 0) return TensorT<T>::zeros({1});

    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n) * vocab);
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto msk = std::make_shared<std::vector<uint8_t>>(mask);

    double loss_sum = 0;
    for (int r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        const int t = targets[r];
        if (t < 0 || t >= vocab)
            throw IndexError("cross_entropy_masked: target " + std::to_string(t) + " outside vocab " +
                             std::to_string(vocab));
        const T* row = logits.data().data() + static_cast<size_t>(r) * vocab;
        T mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T denom = 0;
        for (int j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
        const T lse = mx + std::log(denom);
        for (int j = 0; j < vocab; ++j)
            (*probs)[static_cast<size_t>(r) * vocab + j] = std::exp(row[j] - lse);
        loss_sum += static_cast<double>(lse - row[t]);
    }

    TensorT<T> y = make_op_node<T>({1}, {logits}, [probs, tgt, msk, count, vocab](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] / T(count);
        const int n = static_cast<int>(msk->size());
        for (int r = 0; r < n; ++r) {
            if (!(*msk)[r]) continue;
            for (int j = 0; j < vocab; ++j) {
                T d = (*probs)[static_cast<size_t>(r) * vocab + j];
                if (j == (*tgt)[r]) d -= T(1);
                p.grad[static_cast<size_t>(r) * vocab + j] += g * d;
            }
        }
    });
    y.data()[0] = T(loss_sum / static_cast<double>(count));
    return y;
}

// Mean squared error over entries with mask != 0. pred [N].
template <typename T>
TensorT<T> mse_masked(const TensorT<T>& pred, const std::vector<T>& target,
                      const std::vector<uint8_t>& mask) {
    const int n = static_cast<int>(pred.numel());
    if (static_cast<int>(target.size()) != n || static_cast<int>(mask.size()) != n)
        throw ShapeError("mse_masked: " + std::to_string(target.size()) + " targets, " +
                         std::to_string(mask.size()) + " mask entries for " + std::to_string(n) + " values");
    long long count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    if (count == 0) return TensorT<T>::zeros({1});

    auto tgt = std::make_shared<std::vector<T>>(target);
    auto msk = std::make_shared<std::vector<uint8_t>>(mask);

    double loss_sum = 0;
    for (int r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        const double d = static_cast<double>(pred.data()[r]) - static_cast<double>(target[r]);
        loss_sum += d * d;
    }

    TensorT<T> y = make_op_node<T>({1}, {pred}, [tgt, msk, count](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] * T(2) / T(count);
        for (size_t r = 0; r < msk->size(); ++r) {
            if (!(*msk)[r]) continue;
            p.grad[r] += g * (p.data[r] - (*tgt)[r]);
        }
    });
    y.data()[0] = T(loss_sum / static_cast<double>(count));
    return y;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    TensorT<T> y = make_op_node<T>({1}, {x}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[0];
    });
    double acc = 0;
    for (T v : x.data()) acc += static_cast<double>(v);
    y.data()[0] = T(acc);
    return y;
}

}  // namespace ppm
